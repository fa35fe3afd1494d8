use crate::{Float, Tensor, Var};

impl<'t, T: Float> Var<'t, T> {
    /// Mean cross entropy of `[B, K]` logits against integer labels.
    ///
    /// Panics if a label is out of range; callers validate labels first.
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'t, T> {
        let logits = self.value();
        assert_eq!(logits.rank(), 2, "cross_entropy expects [B, K] logits");
        let (b, k) = (logits.dim(0), logits.dim(1));
        assert_eq!(labels.len(), b, "label count does not match batch");
        let mut probs = vec![T::zero(); b * k];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            assert!(label < k, "label {label} out of range for {k} classes");
            let row = &logits.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total += log_z - row[label];
            for j in 0..k {
                probs[i * k + j] = (row[j] - log_z).exp();
            }
        }
        let inv_b = T::one() / T::of_usize(b.max(1));
        let labels = labels.to_vec();
        self.tape.push(Tensor::scalar(total * inv_b), &[self], move |g, _| {
            let scale = g.data()[0] * inv_b;
            let mut d = probs.clone();
            for (i, &label) in labels.iter().enumerate() {
                d[i * k + label] -= T::one();
            }
            d.iter_mut().for_each(|v| *v *= scale);
            vec![Some(Tensor::from_vec(vec![b, k], d).expect("ce grad"))]
        })
    }

    /// Per-row cross entropy of `[B, K]` logits, shape `[B]`.
    pub fn cross_entropy_rows(self, labels: &[usize]) -> Var<'t, T> {
        let logits = self.value();
        assert_eq!(logits.rank(), 2, "cross_entropy_rows expects [B, K] logits");
        let (b, k) = (logits.dim(0), logits.dim(1));
        assert_eq!(labels.len(), b, "label count does not match batch");
        let mut probs = vec![T::zero(); b * k];
        let mut ce = vec![T::zero(); b];
        for (i, &label) in labels.iter().enumerate() {
            assert!(label < k, "label {label} out of range for {k} classes");
            let row = &logits.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let log_z = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            ce[i] = log_z - row[label];
            for j in 0..k {
                probs[i * k + j] = (row[j] - log_z).exp();
            }
        }
        let labels = labels.to_vec();
        self.tape.push(Tensor::from_vec(vec![b], ce).expect("ce rows"), &[self], move |g, _| {
            let mut d = probs.clone();
            for (i, &label) in labels.iter().enumerate() {
                d[i * k + label] -= T::one();
                let gi = g.data()[i];
                d[i * k..(i + 1) * k].iter_mut().for_each(|v| *v *= gi);
            }
            vec![Some(Tensor::from_vec(vec![b, k], d).expect("ce grad"))]
        })
    }
}
