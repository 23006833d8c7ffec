//! Reverse-mode differentiation over the dense kernels in [`crate::tensor`].
//!
//! A [`Tape`] records one forward evaluation. Nodes that do not depend on any
//! gradient-requiring leaf store no backward closure, so frozen weights and
//! constant inputs cost nothing on the reverse sweep and never receive
//! gradient entries.
//!
//! Tensors on the tape are at most rank 3; matrix ops treat values as
//! row-major `rows x cols`.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::tensor::{self, bilinear_taps};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Backward = Box<dyn Fn(&[f64]) -> Vec<(usize, Vec<f64>)>>;

struct Node {
    value: Rc<Vec<f64>>,
    shape: Vec<usize>,
    backward: Option<Backward>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    zero_norm: Cell<usize>,
}

/// Gradients from one reverse sweep, indexed by [`Var`].
pub struct Gradients(Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => panic!("expected a rank-1 or rank-2 tensor, got {shape:?}"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of cosine evaluations that hit a zero-norm input.
    pub fn zero_norm_events(&self) -> usize {
        self.zero_norm.get()
    }

    pub fn leaf(&self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Var {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "leaf shape mismatch");
        // Leaves differentiate trivially; the marker closure only flags them.
        let backward: Option<Backward> = if requires_grad {
            Some(Box::new(|_| Vec::new()))
        } else {
            None
        };
        self.push(data, shape.to_vec(), backward)
    }

    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Var {
        self.leaf(data, shape, false)
    }

    pub fn value(&self, v: Var) -> Rc<Vec<f64>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "not a scalar");
        val[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].backward.is_some()
    }

    fn push(&self, value: Vec<f64>, shape: Vec<usize>, backward: Option<Backward>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            shape,
            backward,
        });
        Var(nodes.len() - 1)
    }

    fn op(
        &self,
        value: Vec<f64>,
        shape: Vec<usize>,
        any_grad: bool,
        backward: impl Fn(&[f64]) -> Vec<(usize, Vec<f64>)> + 'static,
    ) -> Var {
        let bw: Option<Backward> = if any_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(value, shape, bw)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(bw) = nodes[i].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            for (parent, contrib) in bw(&g) {
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        Gradients(grads)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let (val, ra) = (self.value(a), self.requires_grad(a));
        assert_eq!(val.len(), shape.iter().product::<usize>(), "reshape size mismatch");
        self.op(val.to_vec(), shape.to_vec(), ra, move |g| vec![(a.0, g.to_vec())])
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = rows_cols(&self.shape(a));
        let (k2, n) = rows_cols(&self.shape(b));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = tensor::matmul(&av, &bv, m, k, n);
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        self.op(out, vec![m, n], ra || rb, move |g| {
            let mut v = Vec::with_capacity(2);
            if ra {
                v.push((a.0, tensor::matmul_a_bt(g, &bv, m, n, k)));
            }
            if rb {
                v.push((b.0, tensor::matmul_at_b(&av, g, m, k, n)));
            }
            v
        })
    }

    fn zip_op(&self, a: Var, b: Var, f: fn(f64, f64) -> f64, ga: f64, gb: f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise size mismatch");
        let out = av.iter().zip(bv.iter()).map(|(x, y)| f(*x, *y)).collect();
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        self.op(out, self.shape(a), ra || rb, move |g| {
            let mut v = Vec::with_capacity(2);
            if ra {
                v.push((a.0, g.iter().map(|x| x * ga).collect()));
            }
            if rb {
                v.push((b.0, g.iter().map(|x| x * gb).collect()));
            }
            v
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x + y, 1.0, 1.0)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x - y, 1.0, -1.0)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise size mismatch");
        let out = av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        self.op(out, self.shape(a), ra || rb, move |g| {
            let mut v = Vec::with_capacity(2);
            if ra {
                v.push((a.0, g.iter().zip(bv.iter()).map(|(x, y)| x * y).collect()));
            }
            if rb {
                v.push((b.0, g.iter().zip(av.iter()).map(|(x, y)| x * y).collect()));
            }
            v
        })
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let out = av.iter().map(|x| x * s).collect();
        self.op(out, self.shape(a), self.requires_grad(a), move |g| {
            vec![(a.0, g.iter().map(|x| x * s).collect())]
        })
    }

    /// `Σ wᵢ·xᵢ` over equally shaped tensors.
    pub fn weighted_sum(&self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let shape = self.shape(terms[0].0);
        let n = self.value(terms[0].0).len();
        let mut out = vec![0.0; n];
        for &(v, w) in terms {
            let val = self.value(v);
            assert_eq!(val.len(), n, "weighted_sum size mismatch");
            out.iter_mut().zip(val.iter()).for_each(|(o, x)| *o += w * x);
        }
        let flags: Vec<(usize, f64)> = terms
            .iter()
            .filter(|(v, _)| self.requires_grad(*v))
            .map(|(v, w)| (v.0, *w))
            .collect();
        let any = !flags.is_empty();
        self.op(out, shape, any, move |g| {
            flags
                .iter()
                .map(|&(id, w)| (id, g.iter().map(|x| x * w).collect()))
                .collect()
        })
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean_of(&self, xs: &[Var]) -> Var {
        let w = 1.0 / xs.len() as f64;
        let terms: Vec<(Var, f64)> = xs.iter().map(|&v| (v, w)).collect();
        if xs.len() == 1 {
            return xs[0];
        }
        // Sum first, then divide, matching the plain-slice average.
        let shape = self.shape(xs[0]);
        let n = self.value(xs[0]).len();
        let mut out = vec![0.0; n];
        for &v in xs {
            out.iter_mut().zip(self.value(v).iter()).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= xs.len() as f64);
        let flags: Vec<usize> = terms
            .iter()
            .filter(|(v, _)| self.requires_grad(*v))
            .map(|(v, _)| v.0)
            .collect();
        let any = !flags.is_empty();
        self.op(out, shape, any, move |g| {
            flags
                .iter()
                .map(|&id| (id, g.iter().map(|x| x * w).collect()))
                .collect()
        })
    }

    fn map_op(&self, a: Var, f: fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = av.iter().map(|&x| f(x)).collect();
        let yv = Rc::new(out.clone());
        self.op(out, self.shape(a), self.requires_grad(a), move |g| {
            let d = g
                .iter()
                .zip(av.iter().zip(yv.iter()))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            vec![(a.0, d)]
        })
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.map_op(a, tensor::gelu, |x, _| tensor::gelu_grad(x))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.map_op(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (r, c) = rows_cols(&self.shape(a));
        let (y, inv_std) = tensor::layer_norm_rows(&av, r, c, eps);
        let yv = Rc::new(y.clone());
        self.op(y, self.shape(a), self.requires_grad(a), move |g| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let gr = &g[i * c..(i + 1) * c];
                let yr = &yv[i * c..(i + 1) * c];
                let mg = gr.iter().sum::<f64>() / c as f64;
                let mgy = tensor::dot(gr, yr) / c as f64;
                for j in 0..c {
                    dx[i * c + j] = inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                }
            }
            vec![(a.0, dx)]
        })
    }

    /// Row-wise softmax; `causal` masks entries above the diagonal.
    pub fn softmax_rows(&self, a: Var, causal: bool) -> Var {
        let av = self.value(a);
        let (r, c) = rows_cols(&self.shape(a));
        let mut y = vec![0.0; r * c];
        for i in 0..r {
            let width = if causal { (i + 1).min(c) } else { c };
            let row = tensor::softmax_unchecked(&av[i * c..i * c + width], 1.0);
            y[i * c..i * c + width].copy_from_slice(&row);
        }
        let yv = Rc::new(y.clone());
        self.op(y, self.shape(a), self.requires_grad(a), move |g| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let gr = &g[i * c..(i + 1) * c];
                let yr = &yv[i * c..(i + 1) * c];
                let s = tensor::dot(gr, yr);
                for j in 0..c {
                    dx[i * c + j] = yr[j] * (gr[j] - s);
                }
            }
            vec![(a.0, dx)]
        })
    }

    pub fn transpose(&self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = rows_cols(&self.shape(a));
        let out = tensor::transpose(&av, r, c);
        self.op(out, vec![c, r], self.requires_grad(a), move |g| {
            vec![(a.0, tensor::transpose(g, c, r))]
        })
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (r, c) = rows_cols(&self.shape(a));
        assert!(start + len <= r, "row slice out of range");
        let out = av[start * c..(start + len) * c].to_vec();
        self.op(out, vec![len, c], self.requires_grad(a), move |g| {
            let mut d = vec![0.0; r * c];
            d[start * c..(start + len) * c].copy_from_slice(g);
            vec![(a.0, d)]
        })
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (r, c) = rows_cols(&self.shape(a));
        assert!(start + len <= c, "column slice out of range");
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        self.op(out, vec![r, len], self.requires_grad(a), move |g| {
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                d[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            vec![(a.0, d)]
        })
    }

    /// Stacks tensors with equal column counts on top of each other. Rank-1
    /// inputs count as single rows.
    pub fn concat_rows(&self, xs: &[Var]) -> Var {
        let shapes: Vec<(usize, usize)> = xs.iter().map(|&v| rows_cols(&self.shape(v))).collect();
        let c = shapes[0].1;
        assert!(shapes.iter().all(|s| s.1 == c), "concat_rows column mismatch");
        let mut out = Vec::new();
        for &v in xs {
            out.extend_from_slice(&self.value(v));
        }
        let rows: usize = shapes.iter().map(|s| s.0).sum();
        let parts: Vec<(usize, usize, bool)> = xs
            .iter()
            .zip(&shapes)
            .map(|(&v, s)| (v.0, s.0 * c, self.requires_grad(v)))
            .collect();
        let any = parts.iter().any(|p| p.2);
        self.op(out, vec![rows, c], any, move |g| {
            let mut off = 0;
            let mut v = Vec::new();
            for &(id, n, rg) in &parts {
                if rg {
                    v.push((id, g[off..off + n].to_vec()));
                }
                off += n;
            }
            v
        })
    }

    pub fn concat_cols(&self, xs: &[Var]) -> Var {
        let shapes: Vec<(usize, usize)> = xs.iter().map(|&v| rows_cols(&self.shape(v))).collect();
        let r = shapes[0].0;
        assert!(shapes.iter().all(|s| s.0 == r), "concat_cols row mismatch");
        let total: usize = shapes.iter().map(|s| s.1).sum();
        let vals: Vec<Rc<Vec<f64>>> = xs.iter().map(|&v| self.value(v)).collect();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (val, s) in vals.iter().zip(&shapes) {
                out.extend_from_slice(&val[i * s.1..(i + 1) * s.1]);
            }
        }
        let parts: Vec<(usize, usize, bool)> = xs
            .iter()
            .zip(&shapes)
            .map(|(&v, s)| (v.0, s.1, self.requires_grad(v)))
            .collect();
        let any = parts.iter().any(|p| p.2);
        self.op(out, vec![r, total], any, move |g| {
            let mut v = Vec::new();
            let mut off = 0;
            for &(id, w, rg) in &parts {
                if rg {
                    let mut d = Vec::with_capacity(r * w);
                    for i in 0..r {
                        d.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    v.push((id, d));
                }
                off += w;
            }
            v
        })
    }

    pub fn mean_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = rows_cols(&self.shape(a));
        let out = tensor::mean_rows(&av, r, c);
        self.op(out, vec![1, c], self.requires_grad(a), move |g| {
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[i * c + j] = g[j] / r as f64;
                }
            }
            vec![(a.0, d)]
        })
    }

    /// Same-padded convolution of `x` (`cin x h x w`) with `kernel`
    /// (`cout x cin x k x k`).
    pub fn conv2d(&self, x: Var, kernel: Var) -> Var {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let [cin, h, w] = self.shape(x)[..] else {
            panic!("conv2d input must be rank 3");
        };
        let [cout, kcin, k, k2] = self.shape(kernel)[..] else {
            panic!("conv2d kernel must be rank 4");
        };
        assert!(kcin == cin && k == k2 && k % 2 == 1, "conv2d kernel shape mismatch");
        let out = tensor::conv2d_same_raw(&xv, cin, h, w, &kv, cout, k);
        let (rx, rk) = (self.requires_grad(x), self.requires_grad(kernel));
        self.op(out, vec![cout, h, w], rx || rk, move |g| {
            let mut v = Vec::with_capacity(2);
            if rx {
                v.push((x.0, tensor::conv2d_same_grad_input(g, cin, h, w, &kv, cout, k)));
            }
            if rk {
                v.push((kernel.0, tensor::conv2d_same_grad_kernel(g, &xv, cin, h, w, cout, k)));
            }
            v
        })
    }

    /// Cosine similarity of every row of `v` (`rows x c`) with the vector `t`.
    /// Zero-norm pairs yield 0 with zero gradient and bump the diagnostic
    /// counter.
    pub fn cosine_rows(&self, v: Var, t: Var) -> Var {
        let (vv, tv) = (self.value(v), self.value(t));
        let (r, c) = rows_cols(&self.shape(v));
        assert_eq!(tv.len(), c, "cosine_rows width mismatch");
        let nt = tensor::norm(&tv);
        let mut out = vec![0.0; r];
        let mut nv = vec![0.0; r];
        for i in 0..r {
            let row = &vv[i * c..(i + 1) * c];
            let cs = tensor::cosine_sim(row, &tv);
            if cs.zero_norm {
                self.zero_norm.set(self.zero_norm.get() + 1);
            }
            out[i] = cs.value;
            nv[i] = tensor::norm(row);
        }
        let cos = Rc::new(out.clone());
        let (rv, rt) = (self.requires_grad(v), self.requires_grad(t));
        self.op(out, vec![r], rv || rt, move |g| {
            let mut dv = vec![0.0; r * c];
            let mut dt = vec![0.0; c];
            for i in 0..r {
                if nv[i] == 0.0 || nt == 0.0 || g[i] == 0.0 {
                    continue;
                }
                let row = &vv[i * c..(i + 1) * c];
                let inv = 1.0 / (nv[i] * nt);
                let ci = cos[i];
                for j in 0..c {
                    dv[i * c + j] = g[i] * (tv[j] * inv - ci * row[j] / (nv[i] * nv[i]));
                    dt[j] += g[i] * (row[j] * inv - ci * tv[j] / (nt * nt));
                }
            }
            let mut res = Vec::with_capacity(2);
            if rv {
                res.push((v.0, dv));
            }
            if rt {
                res.push((t.0, dt));
            }
            res
        })
    }

    /// Probability of the second class in a two-way softmax over
    /// `(normal/τ, abnormal/τ)`, elementwise.
    pub fn two_way_softmax(&self, normal: Var, abnormal: Var, temperature: f64) -> Var {
        let (nv, av) = (self.value(normal), self.value(abnormal));
        assert_eq!(nv.len(), av.len());
        let out: Vec<f64> = nv
            .iter()
            .zip(av.iter())
            .map(|(&n, &a)| two_way_prob(n, a, temperature))
            .collect();
        let pv = Rc::new(out.clone());
        let (rn, ra) = (self.requires_grad(normal), self.requires_grad(abnormal));
        self.op(out, self.shape(normal), rn || ra, move |g| {
            let d: Vec<f64> = g
                .iter()
                .zip(pv.iter())
                .map(|(g, p)| g * p * (1.0 - p) / temperature)
                .collect();
            let mut res = Vec::with_capacity(2);
            if rn {
                res.push((normal.0, d.iter().map(|x| -x).collect()));
            }
            if ra {
                res.push((abnormal.0, d));
            }
            res
        })
    }

    /// Align-corners bilinear upsampling of an `h x w` map.
    pub fn upsample(&self, m: Var, target: (usize, usize)) -> Var {
        let mv = self.value(m);
        let (h, w) = rows_cols(&self.shape(m));
        let out = tensor::bilinear_upsample(&mv, (h, w), target).expect("upsample target");
        let (th, tw) = target;
        self.op(out, vec![th, tw], self.requires_grad(m), move |g| {
            let ty = bilinear_taps(h, th);
            let tx = bilinear_taps(w, tw);
            let mut d = vec![0.0; h * w];
            for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gv = g[i * tw + j];
                    d[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    d[y0 * w + x1] += gv * (1.0 - fy) * fx;
                    d[y1 * w + x0] += gv * fy * (1.0 - fx);
                    d[y1 * w + x1] += gv * fy * fx;
                }
            }
            vec![(m.0, d)]
        })
    }

    /// Mean focal loss of `pred` against a fixed binary `target`.
    pub fn focal_loss(&self, pred: Var, target: Rc<Vec<f64>>, gamma: f64, alpha: f64) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len(), "focal target size");
        let loss = crate::losses::focal_loss(&pv, &target, gamma, alpha).expect("focal shapes");
        self.op(vec![loss], vec![1], self.requires_grad(pred), move |g| {
            let n = pv.len() as f64;
            let d = pv
                .iter()
                .zip(target.iter())
                .map(|(&p, &t)| g[0] * crate::losses::focal_grad(p, t, gamma, alpha) / n)
                .collect();
            vec![(pred.0, d)]
        })
    }

    pub fn dice_loss(&self, pred: Var, target: Rc<Vec<f64>>, smooth: f64) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len(), "dice target size");
        let loss = crate::losses::dice_loss(&pv, &target, smooth).expect("dice shapes");
        self.op(vec![loss], vec![1], self.requires_grad(pred), move |g| {
            let inter: f64 = tensor::dot(&pv, &target);
            let denom = pv.iter().sum::<f64>() + target.iter().sum::<f64>() + smooth;
            let num = 2.0 * inter + smooth;
            let d = target
                .iter()
                .map(|&t| -g[0] * (2.0 * t * denom - num) / (denom * denom))
                .collect();
            vec![(pred.0, d)]
        })
    }

    /// Cross-entropy of a two-way softmax over `(normal/τ, abnormal/τ)`
    /// against `label` (true = abnormal). Inputs are scalars.
    pub fn two_way_cross_entropy(&self, normal: Var, abnormal: Var, temperature: f64, label: bool) -> Var {
        let (n, a) = (self.scalar(normal), self.scalar(abnormal));
        let loss = crate::losses::two_way_cross_entropy(n, a, temperature, label);
        let p_abn = two_way_prob(n, a, temperature);
        let (rn, ra) = (self.requires_grad(normal), self.requires_grad(abnormal));
        self.op(vec![loss], vec![1], rn || ra, move |g| {
            let y = if label { 1.0 } else { 0.0 };
            let da = g[0] * (p_abn - y) / temperature;
            let mut res = Vec::with_capacity(2);
            if rn {
                res.push((normal.0, vec![-da]));
            }
            if ra {
                res.push((abnormal.0, vec![da]));
            }
            res
        })
    }
}

/// `exp(a/τ) / (exp(n/τ) + exp(a/τ))` evaluated with max-subtraction.
pub fn two_way_prob(normal: f64, abnormal: f64, temperature: f64) -> f64 {
    let (zn, za) = (normal / temperature, abnormal / temperature);
    let m = zn.max(za);
    let (en, ea) = ((zn - m).exp(), (za - m).exp());
    ea / (en + ea)
}
