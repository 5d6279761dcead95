use super::{Tape, Var};
use crate::tensor::Tensor;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.push(value, &[a, b], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.push(value, &[a, b], Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|x| -x))]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        let value = av.zip_map(&bv, |x, y| x * y);
        self.push(
            value,
            &[a, b],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&bv, |g, y| g * y)),
                    need[1].then(|| g.zip_map(&av, |g, x| g * x)),
                ]
            }),
        )
    }

    /// Sum of several same-shaped values.
    pub fn add_n(&self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty(), "add_n of nothing");
        let mut value = self.value(terms[0]).clone();
        for &t in &terms[1..] {
            value.add_assign(&self.value(t));
        }
        let count = terms.len();
        self.push(value, terms, Box::new(move |g, _| vec![Some(g.clone()); count]))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, &[a], Box::new(move |g, _| vec![Some(g.map(|x| x * s))]))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, &[a], Box::new(|g, _| vec![Some(g.clone())]))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 - x);
        self.push(value, &[a], Box::new(|g, _| vec![Some(g.map(|x| -x))]))
    }

    /// `a * s` where `s` is a single-element variable.
    pub fn scale_by(&self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.rc(a), self.item(s));
        let value = av.map(|x| x * sv);
        let s_shape = self.shape(s);
        self.push(
            value,
            &[a, s],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.map(|x| x * sv)),
                    need[1].then(|| {
                        let dot = g.data().iter().zip(av.data()).map(|(g, x)| g * x).sum();
                        Tensor::full(&s_shape, dot)
                    }),
                ]
            }),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.rc(a);
        let value = av.map(|x| x.max(0.0));
        self.push(
            value,
            &[a],
            Box::new(move |g, _| vec![Some(g.zip_map(&av, |g, x| if x > 0.0 { g } else { 0.0 }))]),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let y = value.clone();
        self.push(
            value,
            &[a],
            Box::new(move |g, _| vec![Some(g.zip_map(&y, |g, y| g * y * (1.0 - y)))]),
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        let shape = self.shape(a);
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, &[a], Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]))
    }

    /// Squared Frobenius norm.
    pub fn sum_sq(&self, a: Var) -> Var {
        let av = self.rc(a);
        let value = Tensor::scalar(av.sum_sq());
        self.push(
            value,
            &[a],
            Box::new(move |g, _| {
                let g = g.item();
                vec![Some(av.map(|x| 2.0 * g * x))]
            }),
        )
    }

    /// `‖a - b‖²_F`.
    pub fn sq_dist(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        self.sum_sq(d)
    }

    /// Square root of a single-element value; the gradient at zero is taken as zero.
    pub fn sqrt(&self, a: Var) -> Var {
        let x = self.item(a);
        let y = x.max(0.0).sqrt();
        let shape = self.shape(a);
        self.push(
            Tensor::full(&shape, y),
            &[a],
            Box::new(move |g, _| {
                let d = if y > 0.0 { 0.5 / y } else { 0.0 };
                vec![Some(g.map(|g| g * d))]
            }),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let old = self.shape(a);
        let value = self.value(a).reshape(shape).expect("reshape to a different element count");
        self.push(value, &[a], Box::new(move |g, _| vec![Some(g.reshape(&old).unwrap())]))
    }

    /// Mean over the leading axis: `[N, ...] -> [...]`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let av = self.rc(a);
        let shape = av.shape().to_vec();
        let (n, row) = (shape[0], av.row_len());
        let mut out = vec![0.0; row];
        for r in 0..n {
            for (o, x) in out.iter_mut().zip(av.row(r)) {
                *o += x / n as f64;
            }
        }
        let value = Tensor::from_vec(&shape[1..], out);
        self.push(
            value,
            &[a],
            Box::new(move |g, _| {
                let mut data = Vec::with_capacity(n * row);
                for _ in 0..n {
                    data.extend(g.data().iter().map(|x| x / n as f64));
                }
                vec![Some(Tensor::from_vec(&shape, data))]
            }),
        )
    }

    /// Repeat `a` along a new leading axis: `[...] -> [n, ...]`.
    pub fn broadcast_rows(&self, a: Var, n: usize) -> Var {
        let av = self.rc(a);
        let inner = av.shape().to_vec();
        let mut shape = vec![n];
        shape.extend_from_slice(&inner);
        let mut data = Vec::with_capacity(n * av.len());
        for _ in 0..n {
            data.extend_from_slice(av.data());
        }
        self.push(
            Tensor::from_vec(&shape, data),
            &[a],
            Box::new(move |g, _| {
                let row = g.row_len();
                let mut out = vec![0.0; row];
                for r in 0..n {
                    for (o, x) in out.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                vec![Some(Tensor::from_vec(&inner, out))]
            }),
        )
    }

    /// Gather slices along the leading axis.
    pub fn select_rows(&self, a: Var, indices: &[usize]) -> Var {
        let av = self.rc(a);
        let src_shape = av.shape().to_vec();
        let row = av.row_len();
        let mut shape = src_shape.clone();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(av.row(i));
        }
        let indices = indices.to_vec();
        self.push(
            Tensor::from_vec(&shape, data),
            &[a],
            Box::new(move |g, _| {
                let mut out = Tensor::zeros(&src_shape);
                let buf = out.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    for (o, x) in buf[i * row..(i + 1) * row].iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                vec![Some(out)]
            }),
        )
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|&p| self.rc(p)).collect();
        let inner = values[0].shape()[1..].to_vec();
        let mut counts = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for v in &values {
            assert_eq!(&v.shape()[1..], &inner[..], "concat_rows inner shape mismatch");
            counts.push(v.dim(0));
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![counts.iter().sum()];
        shape.extend_from_slice(&inner);
        let row: usize = inner.iter().product();
        self.push(
            Tensor::from_vec(&shape, data),
            parts,
            Box::new(move |g, need| {
                let mut offset = 0;
                counts
                    .iter()
                    .zip(need)
                    .map(|(&c, &needed)| {
                        let start = offset;
                        offset += c * row;
                        needed.then(|| {
                            let mut s = vec![c];
                            s.extend_from_slice(&inner);
                            Tensor::from_vec(&s, g.data()[start..start + c * row].to_vec())
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Concatenate `[N, C1, ...]` and `[N, C2, ...]` into `[N, C1 + C2, ...]`.
    pub fn concat_channels(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        assert_eq!(sa[0], sb[0], "concat_channels batch mismatch");
        assert_eq!(sa[2..], sb[2..], "concat_channels spatial mismatch");
        let n = sa[0];
        let (ra, rb) = (av.row_len(), bv.row_len());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..n {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        self.push(
            Tensor::from_vec(&shape, data),
            &[a, b],
            Box::new(move |g, need| {
                let row = ra + rb;
                let split = |lo: usize, len: usize, s: &[usize]| {
                    let mut d = Vec::with_capacity(n * len);
                    for i in 0..n {
                        d.extend_from_slice(&g.data()[i * row + lo..i * row + lo + len]);
                    }
                    Tensor::from_vec(s, d)
                };
                vec![need[0].then(|| split(0, ra, &sa)), need[1].then(|| split(ra, rb, &sb))]
            }),
        )
    }

    /// Mean over every axis after the first two: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&self, a: Var) -> Var {
        let av = self.rc(a);
        let shape = av.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let data: Vec<f64> = av
            .data()
            .chunks(spatial)
            .map(|chunk| chunk.iter().sum::<f64>() / spatial as f64)
            .collect();
        self.push(
            Tensor::from_vec(&[n, c], data),
            &[a],
            Box::new(move |g, _| {
                let mut d = Vec::with_capacity(n * c * spatial);
                for &x in g.data() {
                    d.extend(std::iter::repeat_n(x / spatial as f64, spatial));
                }
                vec![Some(Tensor::from_vec(&shape, d))]
            }),
        )
    }

    /// `x W^T + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv) = (self.rc(x), self.rc(w));
        let (n, din) = (xv.dim(0), xv.dim(1));
        let dout = wv.dim(0);
        assert_eq!(wv.dim(1), din, "linear input width mismatch");
        let bv = self.value(b).clone();
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let xr = xv.row(i);
            for o in 0..dout {
                let wr = wv.row(o);
                out[i * dout + o] = bv.data()[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        self.push(
            Tensor::from_vec(&[n, dout], out),
            &[x, w, b],
            Box::new(move |g, need| {
                let gx = need[0].then(|| {
                    let mut d = vec![0.0; n * din];
                    for i in 0..n {
                        for o in 0..dout {
                            let go = g.data()[i * dout + o];
                            for (dx, wv) in d[i * din..(i + 1) * din].iter_mut().zip(wv.row(o)) {
                                *dx += go * wv;
                            }
                        }
                    }
                    Tensor::from_vec(&[n, din], d)
                });
                let gw = need[1].then(|| {
                    let mut d = vec![0.0; dout * din];
                    for i in 0..n {
                        for o in 0..dout {
                            let go = g.data()[i * dout + o];
                            for (dw, xv) in d[o * din..(o + 1) * din].iter_mut().zip(xv.row(i)) {
                                *dw += go * xv;
                            }
                        }
                    }
                    Tensor::from_vec(&[dout, din], d)
                });
                let gb = need[2].then(|| {
                    let mut d = vec![0.0; dout];
                    for i in 0..n {
                        for (db, go) in d.iter_mut().zip(&g.data()[i * dout..(i + 1) * dout]) {
                            *db += go;
                        }
                    }
                    Tensor::from_vec(&[dout], d)
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.rc(logits);
        let (n, k) = (lv.dim(0), lv.dim(1));
        assert_eq!(labels.len(), n, "one label per logit row");
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            loss += z.ln() + max - row[y];
            probs.extend(row.iter().map(|x| (x - max).exp() / z));
        }
        let labels = labels.to_vec();
        self.push(
            Tensor::scalar(loss / n as f64),
            &[logits],
            Box::new(move |g, _| {
                let scale = g.item() / n as f64;
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= 1.0;
                }
                d.iter_mut().for_each(|x| *x *= scale);
                vec![Some(Tensor::from_vec(&[n, k], d))]
            }),
        )
    }

    /// Softmax over each row of a matrix.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let av = self.rc(a);
        let (r, c) = (av.dim(0), av.dim(1));
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = av.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            out.extend(row.iter().map(|x| (x - max).exp() / z));
        }
        let y = Tensor::from_vec(&[r, c], out);
        let ys = y.clone();
        self.push(
            y,
            &[a],
            Box::new(move |g, _| {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let (yr, gr) = (ys.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::from_vec(&[r, c], d))]
            }),
        )
    }

    /// One element of `a` by flat index, as a scalar.
    pub fn element(&self, a: Var, flat: usize) -> Var {
        let shape = self.shape(a);
        let value = Tensor::scalar(self.value(a).data()[flat]);
        self.push(
            value,
            &[a],
            Box::new(move |g, _| {
                let mut d = Tensor::zeros(&shape);
                d.data_mut()[flat] = g.item();
                vec![Some(d)]
            }),
        )
    }
}

