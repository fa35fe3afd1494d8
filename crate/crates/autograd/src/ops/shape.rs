use crate::{Float, Tensor, Var};

impl<'t, T: Float> Var<'t, T> {
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push(Tensor::scalar(x.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.data()[0]))]
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean over the trailing `k` axes, e.g. global average pooling with `k = 2`.
    pub fn mean_trailing(self, k: usize) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(k <= shape.len(), "mean_trailing({k}) on rank {}", shape.len());
        let split = shape.len() - k;
        let inner: usize = shape[split..].iter().product();
        let outer: usize = shape[..split].iter().product();
        let scale = T::one() / T::of_usize(inner.max(1));
        let out: Vec<T> =
            (0..outer).map(|o| x.data()[o * inner..(o + 1) * inner].iter().copied().sum::<T>() * scale).collect();
        let out_shape = if split == 0 { vec![1] } else { shape[..split].to_vec() };
        self.tape.push(Tensor::from_vec(out_shape, out).expect("mean shape"), &[self], move |g, _| {
            let mut dx = Vec::with_capacity(outer * inner);
            for &gv in g.data() {
                dx.extend(std::iter::repeat_n(gv * scale, inner));
            }
            vec![Some(Tensor::from_vec(shape.clone(), dx).expect("mean grad"))]
        })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'t, T> {
        let x = self.value();
        let orig = x.shape().to_vec();
        self.tape.push(x.reshape(shape), &[self], move |g, _| vec![Some(g.reshape(orig.clone()))])
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.push(x.permute(axes), &[self], move |g, _| vec![Some(g.permute(&inverse))])
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push(x.narrow(axis, start, len), &[self], move |g, _| {
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let full = shape[axis];
            let mut dx = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![Some(Tensor::from_vec(shape.clone(), dx).expect("narrow grad"))]
        })
    }

    /// Split into two halves along `axis` (which must have even length).
    pub fn chunk2(self, axis: usize) -> (Var<'t, T>, Var<'t, T>) {
        let n = self.dim(axis);
        assert!(n % 2 == 0, "chunk2 of odd axis length {n}");
        (self.narrow(axis, 0, n / 2), self.narrow(axis, n / 2, n / 2))
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().collect();
        let lens: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
        tape.push(Tensor::concat(&refs, axis), parts, move |g, mask| {
            let mut start = 0;
            lens.iter()
                .zip(mask)
                .map(|(&len, &m)| {
                    let piece = m.then(|| g.narrow(axis, start, len));
                    start += len;
                    piece
                })
                .collect()
        })
    }
}
