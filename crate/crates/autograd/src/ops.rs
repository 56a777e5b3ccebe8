//! Elementwise, broadcast, shape and reduction ops.

use ndarray::{s, Array2, Axis};

use crate::tape::{Mat, Tape, Var};

fn sum_rows(m: &Mat) -> Mat {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn sum_cols(m: &Mat) -> Mat {
    m.sum_axis(Axis(1)).insert_axis(Axis(1))
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {m}x{k} · {k2}x{n}");
        let value = self.value(a).dot(self.value(b));
        self.push_op(
            value,
            &[a, b],
            Box::new(|c| {
                let ga = c.needs[0].then(|| c.grad.dot(&c.inputs[1].t()));
                let gb = c.needs[1].then(|| c.inputs[0].t().dot(c.grad));
                vec![ga, gb]
            }),
        )
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).1, "matmul_nt inner dims");
        let value = self.value(a).dot(&self.value(b).t());
        self.push_op(
            value,
            &[a, b],
            Box::new(|c| {
                let ga = c.needs[0].then(|| c.grad.dot(c.inputs[1]));
                let gb = c.needs[1].then(|| c.grad.t().dot(c.inputs[0]));
                vec![ga, gb]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().into_owned();
        self.push_op(value, &[a], Box::new(|c| vec![Some(c.grad.t().as_standard_layout().into_owned())]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push_op(
            value,
            &[a, b],
            Box::new(|c| vec![c.needs[0].then(|| c.grad.clone()), c.needs[1].then(|| c.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push_op(
            value,
            &[a, b],
            Box::new(|c| vec![c.needs[0].then(|| c.grad.clone()), c.needs[1].then(|| -c.grad)]),
        )
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push_op(
            value,
            &[a, b],
            Box::new(|c| vec![c.needs[0].then(|| c.grad * c.inputs[1]), c.needs[1].then(|| c.grad * c.inputs[0])]),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push_op(value, &[a], Box::new(move |c| vec![Some(c.grad * s)]))
    }

    /// Sum of any number of same-shaped values.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut value = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            assert_eq!(self.shape(x), value.dim(), "add_n shape mismatch");
            value += self.value(x);
        }
        let n = xs.len();
        self.push_op(value, xs, Box::new(move |c| (0..n).map(|i| c.needs[i].then(|| c.grad.clone())).collect()))
    }

    /// `a + row`, broadcasting a 1×n row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row shape");
        let value = self.value(a) + self.value(row);
        self.push_op(
            value,
            &[a, row],
            Box::new(|c| vec![c.needs[0].then(|| c.grad.clone()), c.needs[1].then(|| sum_rows(c.grad))]),
        )
    }

    /// `a + col`, broadcasting an m×1 column over every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (m, _) = self.shape(a);
        assert_eq!(self.shape(col), (m, 1), "add_col shape");
        let value = self.value(a) + self.value(col);
        self.push_op(
            value,
            &[a, col],
            Box::new(|c| vec![c.needs[0].then(|| c.grad.clone()), c.needs[1].then(|| sum_cols(c.grad))]),
        )
    }

    /// `a ⊙ row`, broadcasting a 1×n row over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "mul_row shape");
        let value = self.value(a) * self.value(row);
        self.push_op(
            value,
            &[a, row],
            Box::new(|c| {
                vec![c.needs[0].then(|| c.grad * c.inputs[1]), c.needs[1].then(|| sum_rows(&(c.grad * c.inputs[0])))]
            }),
        )
    }

    /// `a ⊙ col`, broadcasting an m×1 column over every column of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (m, _) = self.shape(a);
        assert_eq!(self.shape(col), (m, 1), "mul_col shape");
        let value = self.value(a) * self.value(col);
        self.push_op(
            value,
            &[a, col],
            Box::new(|c| {
                vec![c.needs[0].then(|| c.grad * c.inputs[1]), c.needs[1].then(|| sum_cols(&(c.grad * c.inputs[0])))]
            }),
        )
    }

    /// Repeats an m×1 column `n` times.
    pub fn broadcast_col(&mut self, col: Var, n: usize) -> Var {
        let (m, one) = self.shape(col);
        assert_eq!(one, 1, "broadcast_col expects a column");
        let value = self.value(col).broadcast((m, n)).unwrap().to_owned();
        self.push_op(value, &[col], Box::new(|c| vec![Some(sum_cols(c.grad))]))
    }

    /// Repeats a 1×n row `m` times.
    pub fn broadcast_row(&mut self, row: Var, m: usize) -> Var {
        let (one, n) = self.shape(row);
        assert_eq!(one, 1, "broadcast_row expects a row");
        let value = self.value(row).broadcast((m, n)).unwrap().to_owned();
        self.push_op(value, &[row], Box::new(|c| vec![Some(sum_rows(c.grad))]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid_scalar);
        self.push_op(
            value,
            &[a],
            Box::new(|c| {
                let mut g = c.grad.clone();
                g.zip_mut_with(c.out, |g, &s| *g *= s * (1.0 - s));
                vec![Some(g)]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push_op(
            value,
            &[a],
            Box::new(|c| {
                let mut g = c.grad.clone();
                g.zip_mut_with(c.inputs[0], |g, &x| {
                    if x <= 0.0 {
                        *g = 0.0
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push_op(
            value,
            &[a],
            Box::new(|c| {
                let mut g = c.grad.clone();
                g.zip_mut_with(c.inputs[0], |g, &x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    *g *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                });
                vec![Some(g)]
            }),
        )
    }

    /// Reinterprets the row-major data under a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (r0, c0) = self.shape(a);
        assert_eq!(r0 * c0, rows * cols, "reshape size mismatch");
        let data: Vec<f64> = self.value(a).iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), data).unwrap();
        self.push_op(
            value,
            &[a],
            Box::new(move |c| {
                let data: Vec<f64> = c.grad.iter().copied().collect();
                vec![Some(Array2::from_shape_vec((r0, c0), data).unwrap())]
            }),
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let n = self.shape(xs[0]).1;
        let sizes: Vec<usize> = xs
            .iter()
            .map(|&x| {
                assert_eq!(self.shape(x).1, n, "concat_rows column mismatch");
                self.shape(x).0
            })
            .collect();
        let views: Vec<_> = xs.iter().map(|&x| self.value(x).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).unwrap();
        self.push_op(
            value,
            xs,
            Box::new(move |c| {
                let mut start = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| {
                        let g = c.needs[i].then(|| c.grad.slice(s![start..start + r, ..]).to_owned());
                        start += r;
                        g
                    })
                    .collect()
            }),
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let m = self.shape(xs[0]).0;
        let sizes: Vec<usize> = xs
            .iter()
            .map(|&x| {
                assert_eq!(self.shape(x).0, m, "concat_cols row mismatch");
                self.shape(x).1
            })
            .collect();
        let views: Vec<_> = xs.iter().map(|&x| self.value(x).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).unwrap();
        self.push_op(
            value,
            xs,
            Box::new(move |c| {
                let mut start = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let g = c.needs[i].then(|| c.grad.slice(s![.., start..start + w]).to_owned());
                        start += w;
                        g
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start < end && end <= m, "slice_rows {start}..{end} of {m}");
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push_op(
            value,
            &[a],
            Box::new(move |c| {
                let mut g = Mat::zeros((m, n));
                g.slice_mut(s![start..end, ..]).assign(c.grad);
                vec![Some(g)]
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start < end && end <= n, "slice_cols {start}..{end} of {n}");
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push_op(
            value,
            &[a],
            Box::new(move |c| {
                let mut g = Mat::zeros((m, n));
                g.slice_mut(s![.., start..end]).assign(c.grad);
                vec![Some(g)]
            }),
        )
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = self.shape(table);
        let t = self.value(table);
        let mut value = Mat::zeros((ids.len(), d));
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < v, "gather_rows id {id} out of {v}");
            value.row_mut(r).assign(&t.row(id));
        }
        let ids = ids.to_vec();
        self.push_op(
            value,
            &[table],
            Box::new(move |c| {
                let mut g = Mat::zeros((v, d));
                for (r, &id) in ids.iter().enumerate() {
                    let mut row = g.row_mut(id);
                    row += &c.grad.row(r);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Column-wise mean over rows: m×n → 1×n.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, _) = self.shape(a);
        let value = sum_rows(self.value(a)) / m as f64;
        self.push_op(
            value,
            &[a],
            Box::new(move |c| {
                let (_, n) = c.grad.dim();
                vec![Some(c.grad.broadcast((m, n)).unwrap().to_owned() / m as f64)]
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push_op(value, &[a], Box::new(move |c| vec![Some(Mat::from_elem((m, n), c.grad[[0, 0]]))]))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let count = (m * n) as f64;
        let value = Mat::from_elem((1, 1), self.value(a).sum() / count);
        self.push_op(value, &[a], Box::new(move |c| vec![Some(Mat::from_elem((m, n), c.grad[[0, 0]] / count))]))
    }

    /// `Σ a ⊙ weights` for constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: &Mat) -> Var {
        assert_eq!(self.shape(a), weights.dim(), "weighted_sum shape");
        let value = Mat::from_elem((1, 1), (self.value(a) * weights).sum());
        let w = weights.clone();
        self.push_op(value, &[a], Box::new(move |c| vec![Some(&w * c.grad[[0, 0]])]))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).as_standard_layout().into_owned();
        for mut row in value.rows_mut() {
            softmax_inplace(row.as_slice_mut().unwrap());
        }
        self.push_op(
            value,
            &[a],
            Box::new(|c| {
                let mut g = c.grad * c.out;
                for (mut grow, prow) in g.rows_mut().into_iter().zip(c.out.rows()) {
                    let dot: f64 = grow.sum();
                    grow.zip_mut_with(&prow, |gv, &p| *gv -= p * dot);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Column-wise softmax (each column is a distribution).
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let t = self.transpose(a);
        let s = self.softmax_rows(t);
        self.transpose(s)
    }

    /// Row-wise layer normalisation with affine 1×n `gamma`, `beta`.
    #[allow(clippy::needless_range_loop)]
    pub fn layer_norm_rows(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(gamma), (1, n), "layer_norm gamma shape");
        assert_eq!(self.shape(beta), (1, n), "layer_norm beta shape");
        let x = self.value(a);
        let mut xhat = Mat::zeros((m, n));
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = x.row(r);
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (v - mean) * is;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push_op(
            value,
            &[a, gamma, beta],
            Box::new(move |c| {
                let gamma = c.inputs[1];
                let ga = c.needs[0].then(|| {
                    let dxhat = c.grad * gamma;
                    let mut gx = Mat::zeros((m, n));
                    for r in 0..m {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let mean_d = dr.sum() / n as f64;
                        let mean_dx = dr.iter().zip(xr.iter()).map(|(d, x)| d * x).sum::<f64>() / n as f64;
                        for ((o, d), x) in gx.row_mut(r).iter_mut().zip(dr.iter()).zip(xr.iter()) {
                            *o = inv_std[r] * (d - mean_d - x * mean_dx);
                        }
                    }
                    gx
                });
                let gg = c.needs[1].then(|| sum_rows(&(c.grad * &xhat)));
                let gb = c.needs[2].then(|| sum_rows(c.grad));
                vec![ga, gg, gb]
            }),
        )
    }
}

pub(crate) fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
