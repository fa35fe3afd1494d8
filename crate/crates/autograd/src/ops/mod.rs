mod conv;
mod elementwise;
mod linalg;
mod loss;
mod shape;
