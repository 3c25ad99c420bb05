//! Double-double reference forward pass, used as a finite-difference oracle
//! whose rounding error sits far below the gradients it checks.

use std::ops::{Add, Div, Mul, Neg, Sub};

use fedval_core::autodiff::ParamLayout;
use fedval_core::models::{Activation, Architecture, ModelSpec, Pooling};

const POOL: usize = 2;

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi)/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn ldexp(self, k: i32) -> Dd {
        let s = 2f64.powi(k);
        Dd { hi: self.hi * s, lo: self.lo * s }
    }

    pub fn exp(self) -> Dd {
        if self.hi < -700.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        // r = (x − k·ln2) / 2^10, then exp(r) by Taylor and ten squarings.
        let r = (self - LN2 * Dd::from(k)).ldexp(-10);
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for n in 1..=12 {
            term = term * r / Dd::from(n as f64);
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.ldexp(k as i32)
    }

    pub fn ln(self) -> Dd {
        assert!(self.hi > 0.0, "ln of non-positive {}", self.hi);
        let mut y = Dd::from(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }

    pub fn tanh(self) -> Dd {
        let e = (-(self.abs() + self.abs())).exp();
        let t = (Dd::ONE - e) / (Dd::ONE + e);
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }

    pub fn softplus(self) -> Dd {
        let pos = if self.hi > 0.0 { self } else { Dd::ZERO };
        pos + (Dd::ONE + (-self.abs()).exp()).ln()
    }

    fn abs(self) -> Dd {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
}

impl From<f64> for Dd {
    fn from(hi: f64) -> Self {
        Dd { hi, lo: 0.0 }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + -b
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let p = self.hi * b.hi;
        let e = self.hi.mul_add(b.hi, -p);
        quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * Dd::from(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::from(q2);
        let q3 = r.hi / b.hi;
        quick_two_sum(q1, q2) + Dd::from(q3)
    }
}

fn activate(a: Activation, v: Dd) -> Dd {
    match a {
        Activation::Tanh => v.tanh(),
        Activation::Softplus => v.softplus(),
        Activation::Relu => {
            if v.hi > 0.0 {
                v
            } else {
                Dd::ZERO
            }
        }
    }
}

struct Params<'a> {
    layout: &'a ParamLayout,
    data: &'a [Dd],
}

impl Params<'_> {
    fn block(&self, name: &str) -> &[Dd] {
        let b = self.layout.block(name).unwrap_or_else(|| panic!("missing block {name}"));
        &self.data[b.range()]
    }
}

fn dense(w: &[Dd], b: &[Dd], x: &[Dd]) -> Vec<Dd> {
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            let row = &w[o * x.len()..(o + 1) * x.len()];
            row.iter().zip(x).fold(bias, |acc, (&wi, &xi)| acc + wi * xi)
        })
        .collect()
}

/// Cross-entropy loss of `spec` at `params` on a `[C,H,W]` input.
pub fn loss(spec: &ModelSpec, layout: &ParamLayout, params: &[Dd], input: &[Dd], label: usize) -> Dd {
    let params = Params { layout, data: params };
    let [mut c, mut h, mut w] = spec.input_shape;
    let mut x = input.to_vec();
    let mut hidden: Vec<usize> = Vec::new();
    match &spec.architecture {
        Architecture::Mlp { hidden: widths } => hidden.extend(widths),
        Architecture::Cnn { blocks, pooling, head } => {
            for (i, blk) in blocks.iter().enumerate() {
                let wt = params.block(&format!("conv{}.weight", i + 1));
                let bs = params.block(&format!("conv{}.bias", i + 1));
                let (k, s) = (blk.kernel, blk.stride);
                let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
                let mut y = vec![Dd::ZERO; blk.channels * oh * ow];
                for o in 0..blk.channels {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut acc = bs[o];
                            for ch in 0..c {
                                for p in 0..k {
                                    for q in 0..k {
                                        let wv = wt[((o * c + ch) * k + p) * k + q];
                                        acc = acc + wv * x[(ch * h + i * s + p) * w + j * s + q];
                                    }
                                }
                            }
                            y[(o * oh + i) * ow + j] = activate(spec.activation, acc);
                        }
                    }
                }
                (c, h, w, x) = (blk.channels, oh, ow, y);
                match pooling {
                    Pooling::None => {}
                    Pooling::Avg => {
                        let (ph, pw) = (h / POOL, w / POOL);
                        let mut y = vec![Dd::ZERO; c * ph * pw];
                        for ch in 0..c {
                            for i in 0..ph {
                                for j in 0..pw {
                                    let mut acc = Dd::ZERO;
                                    for p in 0..POOL {
                                        for q in 0..POOL {
                                            acc = acc + x[(ch * h + i * POOL + p) * w + j * POOL + q];
                                        }
                                    }
                                    y[(ch * ph + i) * pw + j] = acc / Dd::from((POOL * POOL) as f64);
                                }
                            }
                        }
                        (h, w, x) = (ph, pw, y);
                    }
                    Pooling::Max => unimplemented!("the gradient check uses smooth models only"),
                }
            }
            hidden.extend(head.iter());
        }
    }
    for i in 0..hidden.len() {
        let y = dense(params.block(&format!("fc{}.weight", i + 1)), params.block(&format!("fc{}.bias", i + 1)), &x);
        x = y.into_iter().map(|v| activate(spec.activation, v)).collect();
    }
    let z = dense(params.block("out.weight"), params.block("out.bias"), &x);
    let m = z.iter().map(|v| v.hi).fold(f64::NEG_INFINITY, f64::max);
    let sum = z.iter().fold(Dd::ZERO, |acc, &v| acc + (v - Dd::from(m)).exp());
    Dd::from(m) - z[label] + sum.ln()
}

/// Central differences with step `h`, evaluated in double-double.
pub fn central_diff(f: impl Fn(&[Dd]) -> Dd, point: &[Dd], h: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    let step = Dd::from(h);
    (0..x.len())
        .map(|i| {
            let v = x[i];
            x[i] = v + step;
            let up = f(&x);
            x[i] = v - step;
            let down = f(&x);
            x[i] = v;
            ((up - down) / (step + step)).to_f64()
        })
        .collect()
}

pub fn lift(v: &[f64]) -> Vec<Dd> {
    v.iter().map(|&x| Dd::from(x)).collect()
}

/// Worst error of the elementary functions against f64 and of the
/// `ln ∘ exp` round trip; both should be at rounding level.
pub fn self_check() -> (f64, f64) {
    let (mut vs_f64, mut round_trip) = (0.0f64, 0.0f64);
    for v in [-3.7, -0.8, 1e-3, 0.3, 2.5, 12.0] {
        let x = Dd::from(v);
        vs_f64 = vs_f64
            .max((x.exp().to_f64() / v.exp() - 1.0).abs())
            .max((x.tanh().to_f64() - v.tanh()).abs())
            .max((x.softplus().to_f64() - v.exp().ln_1p()).abs());
        round_trip = round_trip.max((x.exp().ln() - x).to_f64().abs());
    }
    let third = Dd::ONE / Dd::from(3.0);
    round_trip = round_trip.max((third * Dd::from(3.0) - Dd::ONE).to_f64().abs());
    (vs_f64, round_trip)
}
