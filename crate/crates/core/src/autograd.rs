//! A define-by-run reverse-mode tape over [`Tensor`].
//!
//! Every forward pass records onto its own [`Tape`]; [`Var`] is a cheap copyable
//! handle into it. Nodes whose inputs are all constants carry no backward
//! closure, so gradients are never computed for frozen parameters.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{self, ConvGeom, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(Rc::new(value), false, Vec::new(), None)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(Rc::new(value), true, Vec::new(), None)
    }

    fn insert(&self, value: Rc<Tensor>, requires_grad: bool, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, parents, backward });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn record<'t>(
        &'t self,
        value: impl Into<Rc<Tensor>>,
        parents: &[Var<'t>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let requires = parents.iter().any(|p| p.requires_grad());
        let ids = parents.iter().map(|p| p.id).collect();
        let bw: Option<BackwardFn> = if requires { Some(Box::new(backward)) } else { None };
        self.insert(value.into(), requires, ids, bw)
    }

    /// Reverse sweep from `root`, seeded with ones of its shape.
    pub fn backward(&self, root: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.id].requires_grad {
            return Grads { grads };
        }
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = bw(&g, &mask);
            grads[id] = Some(g);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(mask) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Grads { grads }
    }
}

fn unbroadcast(g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        g
    } else {
        g.sum_to_shape(shape)
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let u = K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn binary(self, other: Var<'t>, f: impl Fn(&Tensor, &Tensor) -> Tensor, bw: impl Fn(&Tensor, &Tensor, &Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = f(&a, &b);
        self.tape.record(out, &[self, other], move |g, m| bw(g, &a, &b, m))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Tensor::add, |g, a, b, m| {
            vec![
                m[0].then(|| unbroadcast(g.clone(), a.shape())),
                m[1].then(|| unbroadcast(g.clone(), b.shape())),
            ]
        })
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Tensor::sub, |g, a, b, m| {
            vec![
                m[0].then(|| unbroadcast(g.clone(), a.shape())),
                m[1].then(|| unbroadcast(g.scale(-1.0), b.shape())),
            ]
        })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Tensor::mul, |g, a, b, m| {
            vec![
                m[0].then(|| unbroadcast(g.mul(b), a.shape())),
                m[1].then(|| unbroadcast(g.mul(a), b.shape())),
            ]
        })
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a.zip_with(b, |x, y| x / y), |g, a, b, m| {
            vec![
                m[0].then(|| unbroadcast(g.zip_with(b, |gv, bv| gv / bv), a.shape())),
                m[1].then(|| {
                    let q = a.zip_with(b, |av, bv| -av / (bv * bv));
                    unbroadcast(g.mul(&q), b.shape())
                }),
            ]
        })
    }

    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        self.tape.record(y, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data().iter().zip(yc.data()))
                .map(|(gv, (&xv, &yv))| gv * df(xv, yv))
                .collect();
            vec![Some(Tensor::new(g.shape(), data))]
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu_fwd, |x, _| gelu_grad(x))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn sqr(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Subgradient 0 at the kink.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.record(Tensor::scalar(x.sum()), &[self], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum_axes(self, axes: &[usize], keepdim: bool) -> Var<'t> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let kept = x.sum_axes_keepdim(axes);
        let kept_shape = kept.shape().to_vec();
        let out = if keepdim {
            kept
        } else {
            let s: Vec<usize> = in_shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
            kept.reshape(&s)
        };
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.clone().reshape(&kept_shape).broadcast_to(&in_shape))]
        })
    }

    pub fn mean_axes(self, axes: &[usize], keepdim: bool) -> Var<'t> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes, keepdim).scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let out = Rc::unwrap_or_clone(x).reshape(shape);
        self.tape.record(out, &[self], move |g, _| vec![Some(g.clone().reshape(&orig))])
    }

    pub fn permute(self, perm: &[usize]) -> Var<'t> {
        let out = self.value().permute(perm);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.tape.record(out, &[self], move |g, _| vec![Some(g.permute(&inv))])
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = x.narrow(axis, start, len);
        self.tape.record(out, &[self], move |g, _| {
            let mut parts = Vec::new();
            let mut before = shape.clone();
            before[axis] = start;
            let mut after = shape.clone();
            after[axis] = shape[axis] - start - len;
            let (zb, za) = (Tensor::zeros(&before), Tensor::zeros(&after));
            if start > 0 {
                parts.push(&zb);
            }
            parts.push(g);
            if after[axis] > 0 {
                parts.push(&za);
            }
            vec![Some(Tensor::cat(&parts, axis))]
        })
    }

    pub fn cat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::cat(&refs, axis);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        parts[0].tape.record(out, parts, move |g, m| {
            let mut start = 0;
            sizes
                .iter()
                .zip(m)
                .map(|(&n, &need)| {
                    let r = need.then(|| g.narrow(axis, start, n));
                    start += n;
                    r
                })
                .collect()
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Tensor::matmul, |g, a, b, m| {
            vec![
                m[0].then(|| g.matmul_t(false, b, true)),
                m[1].then(|| a.matmul_t(true, g, false)),
            ]
        })
    }

    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, geom: ConvGeom) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let out = tensor::conv2d(&x, &w, b.as_deref(), geom);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.tape.record(out, &parents, move |g, m| {
            let (gx, gw) = tensor::conv2d_backward(&x, &w, g, geom, m[0], m[1]);
            let mut r = vec![gx, gw];
            if m.len() == 3 {
                let cout = g.shape()[1];
                r.push(m[2].then(|| g.sum_axes_keepdim(&[0, 2, 3]).reshape(&[cout])));
            }
            r
        })
    }

    pub fn upsample2x(self) -> Var<'t> {
        let out = tensor::upsample_nearest2x(&self.value());
        self.tape.record(out, &[self], |g, _| vec![Some(tensor::upsample_nearest2x_backward(g))])
    }

    pub fn softmax(self, axis: usize) -> Var<'t> {
        let y = Rc::new(self.value().softmax(axis));
        let yc = y.clone();
        self.tape.record(y, &[self], move |g, _| {
            let dot = g.mul(&yc).sum_axes_keepdim(&[axis]);
            vec![Some(yc.mul(&g.sub(&dot)))]
        })
    }

    pub fn log_softmax(self, axis: usize) -> Var<'t> {
        let y = self.value().log_softmax(axis);
        let p = y.map(f64::exp);
        self.tape.record(y, &[self], move |g, _| {
            let gs = g.sum_axes_keepdim(&[axis]);
            vec![Some(g.sub(&p.mul(&gs)))]
        })
    }

    /// `(B,C,H,W) -> (B,C/r², H·r, W·r)`.
    pub fn pixel_shuffle(self, r: usize) -> Var<'t> {
        let s = self.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let co = c / (r * r);
        self.reshape(&[b, co, r, r, h, w]).permute(&[0, 1, 4, 2, 5, 3]).reshape(&[b, co, h * r, w * r])
    }

    /// Inverse of [`Var::pixel_shuffle`].
    pub fn pixel_unshuffle(self, r: usize) -> Var<'t> {
        let s = self.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        self.reshape(&[b, c, h / r, r, w / r, r]).permute(&[0, 1, 3, 5, 2, 4]).reshape(&[b, c * r * r, h / r, w / r])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `f` (a scalar function of one input).
    fn check(shape: &[usize], seed: u64, f: impl for<'a> Fn(Var<'a>) -> Var<'a>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::randn(shape, 1.0, &mut rng).map(|v| v + 0.1);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(x);
        let grads = tape.backward(y);
        let analytic = grads.get(x).unwrap().clone();
        let eval = |t: Tensor| {
            let tape = Tape::new();
            f(tape.constant(t)).value().item()
        };
        let h = 1e-6;
        for i in 0..x0.numel() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let num = (eval(p) - eval(m)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((num - a).abs() <= 1e-6 * (1.0 + a.abs()), "elem {i}: numeric {num} vs analytic {a}");
        }
    }

    fn weight<'a>(x: Var<'a>, seed: u64) -> Var<'a> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(&x.shape(), 1.0, &mut rng);
        x.mul(x.tape().constant(w)).sum_all()
    }

    #[test]
    fn elementwise_grads() {
        check(&[2, 3], 1, |x| weight(x.tanh().add(x.sigmoid()).mul(x.gelu()), 10));
        check(&[2, 3], 2, |x| weight(x.exp().sub(x.sqr()).add(x.abs().add_scalar(1.0).ln()), 11));
        check(&[4], 3, |x| {
            let d = x.sqr().add_scalar(1.0).sqrt();
            weight(x.div(d), 12)
        });
    }

    #[test]
    fn broadcast_grads() {
        check(&[3, 1], 4, |x| {
            let other = x.tape().constant(Tensor::new(&[1, 4], vec![1.0, -2.0, 0.5, 3.0]));
            weight(x.mul(other).add(x), 13)
        });
        check(&[1, 4], 5, |x| {
            let other = x.tape().constant(Tensor::new(&[3, 1], vec![1.5, -2.0, 0.5]));
            weight(other.div(x.sqr().add_scalar(1.0)), 14)
        });
    }

    #[test]
    fn reduction_and_layout_grads() {
        check(&[2, 3, 4], 6, |x| weight(x.mean_axes(&[1], true).mul(x), 15));
        check(&[2, 3, 4], 7, |x| weight(x.sum_axes(&[0, 2], false), 16));
        check(&[2, 3, 4], 8, |x| weight(x.permute(&[2, 0, 1]).reshape(&[4, 6]), 17));
        check(&[2, 5], 9, |x| {
            let a = x.narrow(1, 1, 3);
            let b = x.narrow(1, 0, 2);
            weight(Var::cat(&[a, b, a], 1), 18)
        });
        check(&[1, 8, 2, 3], 10, |x| weight(x.pixel_shuffle(2), 19));
        check(&[1, 2, 4, 6], 11, |x| weight(x.pixel_unshuffle(2), 20));
    }

    #[test]
    fn softmax_grads() {
        check(&[2, 5], 12, |x| weight(x.softmax(1), 21));
        check(&[2, 3, 2], 13, |x| weight(x.log_softmax(1), 22));
    }

    #[test]
    fn conv_and_matmul_grads() {
        check(&[1, 4, 5, 5], 14, |x| {
            let mut rng = ChaCha8Rng::seed_from_u64(40);
            let w = x.tape().constant(Tensor::randn(&[4, 2, 3, 3], 0.5, &mut rng));
            let b = x.tape().constant(Tensor::randn(&[4], 0.5, &mut rng));
            let g = ConvGeom { stride: 2, padding: 1, groups: 2 };
            weight(x.conv2d(w, Some(b), g).upsample2x(), 23)
        });
        check(&[4, 2, 3, 3], 15, |w| {
            let mut rng = ChaCha8Rng::seed_from_u64(41);
            let x = w.tape().constant(Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng));
            let g = ConvGeom { stride: 1, padding: 1, groups: 2 };
            weight(x.conv2d(w, None, g), 24)
        });
        check(&[3, 4], 16, |a| {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let b = a.tape().constant(Tensor::randn(&[4, 2], 1.0, &mut rng));
            weight(a.matmul(b).add(b.permute(&[1, 0]).matmul(a.permute(&[1, 0])).permute(&[1, 0])), 25)
        });
    }

    #[test]
    fn constants_carry_no_backward() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::ones(&[2]));
        let y = c.tanh().sum_all();
        assert!(!y.requires_grad());
        let grads = tape.backward(y);
        assert!(grads.get(c).is_none());
    }
}
