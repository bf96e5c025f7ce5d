//! The finite-difference gradient oracle over every differentiable op and
//! every loss term.
//!
//! Inputs are drawn in double precision from a seeded generator and kept a
//! margin away from kinks (abs, PReLU, clamps, ties in max), so the central
//! difference never straddles a non-differentiable point.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{
    linear_log_penalty, loss_cgan_d, loss_cgan_g, loss_mask, loss_substrate, loss_total, loss_vgg, negative_diff,
    positive_diff, GeneratorTerms, LossWeights, VggTerms,
};
use crate::models::TargetVector;
use crate::tensor::{GradCheckOutcome, GradCheckSuite, OpKind, Tape, Tensor, Var, WnLayout};

pub const ORACLE_EPSILON: f64 = 1e-3;
pub const ORACLE_TOLERANCE: f64 = 1e-3;

/// Smallest distance kept between an input and a kink.
const MARGIN: f64 = 0.05;

struct Gen(ChaCha8Rng);

impl Gen {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.0.random_range(lo..hi)).collect();
        Tensor::new(shape, data, false).expect("valid shape")
    }

    /// Uniform in [−1, 1] with `|x| ≥ MARGIN`.
    fn signed(&mut self, shape: &[usize]) -> Tensor<f64> {
        let mut t = self.uniform(shape, MARGIN, 1.0);
        for x in t.data_mut() {
            if self.0.random::<bool>() {
                *x = -*x;
            }
        }
        t
    }

    /// Distinct values in [−1, 1], pairwise at least `MARGIN / n` apart,
    /// in random order.
    fn distinct(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let step = 2.0 / n as f64;
        let mut vals: Vec<f64> = (0..n)
            .map(|i| -1.0 + step * (i as f64 + 0.5) + self.0.random_range(-0.25..0.25) * step)
            .collect();
        for i in (1..n).rev() {
            vals.swap(i, self.0.random_range(0..=i));
        }
        Tensor::new(shape, vals, false).expect("valid shape")
    }
}

fn constant(tape: &mut Tape<f64>, t: &Tensor<f64>) -> Var {
    tape.constant(t.shape(), t.data().to_vec()).expect("valid tensor")
}

/// `Σ r ⊙ y` for a fixed random `r`, turning any output into a scalar with
/// a non-trivial gradient.
fn probe(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = constant(tape, r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn probe_weights(g: &mut Gen, shape: &[usize]) -> Tensor<f64> {
    g.uniform(shape, -1.0, 1.0)
}

/// Builds the full suite for `seed`.
pub fn standard_suite(seed: u64) -> GradCheckSuite {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed));
    let mut s = GradCheckSuite::new();
    let (eps, tol) = (ORACLE_EPSILON, ORACLE_TOLERANCE);

    // elementwise
    let other = g.signed(&[2, 3]);
    let r = probe_weights(&mut g, &[2, 3]);
    for (name, kind) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let (other, r) = (other.clone(), r.clone());
        s.add(name, g.signed(&[2, 3]), eps, tol, move |t, x| {
            let o = constant(t, &other);
            let y = match kind {
                0 => t.add(x, o)?,
                1 => t.sub(o, x)?,
                _ => t.mul(x, o)?,
            };
            probe(t, y, &r)
        });
    }
    macro_rules! unary {
        ($name:expr, $x:expr, |$t:ident, $v:ident| $body:expr) => {{
            let r = probe_weights(&mut g, &[2, 3]);
            s.add($name, $x, eps, tol, move |$t, $v| {
                let y = $body;
                probe($t, y, &r)
            });
        }};
    }
    unary!("abs", g.signed(&[2, 3]), |t, x| t.abs(x));
    unary!("log", g.uniform(&[2, 3], 0.2, 1.0), |t, x| t.log(x)?);
    unary!("square", g.signed(&[2, 3]), |t, x| t.square(x));
    unary!("negate", g.signed(&[2, 3]), |t, x| t.neg(x));
    unary!("scale", g.signed(&[2, 3]), |t, x| t.scale(x, -1.75));
    unary!("add_scalar", g.signed(&[2, 3]), |t, x| {
        let y = t.add_scalar(x, 0.3);
        t.square(y)
    });
    unary!("clamp_min", g.signed(&[2, 3]), |t, x| {
        let y = t.clamp_min(x, 0.0);
        t.square(y)
    });
    unary!("tanh", g.uniform(&[2, 3], -2.0, 2.0), |t, x| t.tanh(x));
    unary!("sigmoid", g.uniform(&[2, 3], -2.0, 2.0), |t, x| t.sigmoid(x));

    let slope = Tensor::new(&[1], vec![0.2], false).unwrap();
    let r = probe_weights(&mut g, &[2, 3]);
    {
        let (slope, r) = (slope.clone(), r.clone());
        s.add("prelu/input", g.signed(&[2, 3]), eps, tol, move |t, x| {
            let a = constant(t, &slope);
            let y = t.prelu(x, a)?;
            probe(t, y, &r)
        });
    }
    {
        let xin = g.signed(&[2, 3]);
        s.add("prelu/slope", slope, eps, tol, move |t, a| {
            let x = constant(t, &xin);
            let y = t.prelu(x, a)?;
            probe(t, y, &r)
        });
    }

    // reductions
    s.add("sum", g.signed(&[7]), eps, tol, |t, x| {
        let y = t.square(x);
        Ok(t.sum(y))
    });
    s.add("mean", g.signed(&[7]), eps, tol, |t, x| {
        let y = t.square(x);
        Ok(t.mean(y))
    });
    s.add("max", g.distinct(&[9]), eps, tol, |t, x| {
        let y = t.scale(x, 3.0);
        Ok(t.max(y))
    });

    // weight normalization and convolutions
    let gain = g.uniform(&[3], 0.5, 1.5);
    let r = probe_weights(&mut g, &[3, 2, 4, 4]);
    {
        let (gain, r) = (gain.clone(), r.clone());
        s.add("weight_norm/v", g.signed(&[3, 2, 4, 4]), eps, tol, move |t, v| {
            let gv = constant(t, &gain);
            let w = t.weight_norm(v, gv, WnLayout::OutMajor)?;
            probe(t, w, &r)
        });
    }
    {
        let v = g.signed(&[3, 2, 4, 4]);
        s.add("weight_norm/g", gain.clone(), eps, tol, move |t, gv| {
            let v = constant(t, &v);
            let w = t.weight_norm(v, gv, WnLayout::OutMajor)?;
            probe(t, w, &r)
        });
    }
    {
        let r = probe_weights(&mut g, &[2, 3, 4, 4]);
        let gain = g.uniform(&[3], 0.5, 1.5);
        s.add("weight_norm/v_in_major", g.signed(&[2, 3, 4, 4]), eps, tol, move |t, v| {
            let gv = constant(t, &gain);
            let w = t.weight_norm(v, gv, WnLayout::InMajor)?;
            probe(t, w, &r)
        });
    }

    conv_cases(&mut s, &mut g, false);
    conv_cases(&mut s, &mut g, true);

    // shape plumbing
    {
        let other = g.signed(&[1, 3, 4, 4]);
        let r = probe_weights(&mut g, &[1, 5, 4, 4]);
        s.add("concat_channels", g.signed(&[1, 2, 4, 4]), eps, tol, move |t, x| {
            let o = constant(t, &other);
            let y = t.concat_channels(o, x)?;
            probe(t, y, &r)
        });
    }
    for (name, out) in [("resize_bilinear/down", 3usize), ("resize_bilinear/up", 7)] {
        let r = probe_weights(&mut g, &[1, 2, out, out]);
        s.add(name, g.signed(&[1, 2, 5, 5]), eps, tol, move |t, x| {
            let y = t.resize_bilinear(x, out, out)?;
            probe(t, y, &r)
        });
    }
    {
        let r = probe_weights(&mut g, &[2, 2, 3, 3]);
        s.add("crop", g.signed(&[2, 2, 5, 5]), eps, tol, move |t, x| {
            let y = t.crop(x, 1, 2, 3, 3)?;
            probe(t, y, &r)
        });
    }
    {
        let r = probe_weights(&mut g, &[3, 4]);
        s.add("reshape", g.signed(&[2, 6]), eps, tol, move |t, x| {
            let y = t.reshape(x, &[3, 4])?;
            let y = t.square(y);
            probe(t, y, &r)
        });
    }

    // dense and row ops
    let (w, b) = (g.signed(&[4, 5]), g.signed(&[4]));
    let xin = g.signed(&[3, 5]);
    let r = probe_weights(&mut g, &[3, 4]);
    for which in 0..3 {
        let name = ["linear/input", "linear/weight", "linear/bias"][which];
        let x0 = [xin.clone(), w.clone(), b.clone()][which].clone();
        let (xin, w, b, r) = (xin.clone(), w.clone(), b.clone(), r.clone());
        s.add(name, x0, eps, tol, move |t, v| {
            let xv = if which == 0 { v } else { constant(t, &xin) };
            let wv = if which == 1 { v } else { constant(t, &w) };
            let bv = if which == 2 { v } else { constant(t, &b) };
            let y = t.linear(xv, wv, bv)?;
            probe(t, y, &r)
        });
    }
    {
        let r = probe_weights(&mut g, &[3, 5]);
        s.add("log_softmax", g.uniform(&[3, 5], -2.0, 2.0), eps, tol, move |t, x| {
            let y = t.log_softmax(x)?;
            probe(t, y, &r)
        });
    }
    {
        let r = probe_weights(&mut g, &[3, 5]);
        s.add("softmax", g.uniform(&[3, 5], -2.0, 2.0), eps, tol, move |t, x| {
            let y = t.softmax(x)?;
            probe(t, y, &r)
        });
    }
    {
        let r = probe_weights(&mut g, &[3, 3]);
        s.add("select_cols", g.signed(&[3, 5]), eps, tol, move |t, x| {
            let y = t.select_cols(x, &[4, 0, 2])?;
            let y = t.square(y);
            probe(t, y, &r)
        });
    }
    {
        let r = probe_weights(&mut g, &[3]);
        s.add("gather_rows", g.signed(&[3, 5]), eps, tol, move |t, x| {
            let y = t.gather_rows(x, &[1, 4, 0])?;
            let y = t.square(y);
            probe(t, y, &r)
        });
    }
    {
        let r = probe_weights(&mut g, &[3]);
        s.add("row_mean", g.signed(&[3, 5]), eps, tol, move |t, x| {
            let y = t.square(x);
            let y = t.row_mean(y)?;
            probe(t, y, &r)
        });
    }
    {
        // Operand values interleave so every operand wins somewhere.
        let a = g.distinct(&[2, 6]);
        let c = g.distinct(&[2, 6]);
        let r = probe_weights(&mut g, &[2, 6]);
        let mut x0 = g.distinct(&[2, 6]);
        for (i, v) in x0.data_mut().iter_mut().enumerate() {
            let (av, cv) = (a.data()[i], c.data()[i]);
            if (*v - av).abs() < MARGIN || (*v - cv).abs() < MARGIN {
                *v = av.max(cv) + 2.0 * MARGIN * if i % 2 == 0 { 1.0 } else { -8.0 };
            }
        }
        s.add("max_of", x0, eps, tol, move |t, x| {
            let av = constant(t, &a);
            let cv = constant(t, &c);
            let y = t.max_of(&[av, x, cv])?;
            probe(t, y, &r)
        });
    }

    loss_cases(&mut s, &mut g);
    s
}

fn conv_cases(s: &mut GradCheckSuite, g: &mut Gen, transposed: bool) {
    let (eps, tol) = (ORACLE_EPSILON, ORACLE_TOLERANCE);
    let (cin, cout) = (2, 3);
    let input_shape = [1, cin, 6, 6];
    let wshape = if transposed { [cin, cout, 4, 4] } else { [cout, cin, 4, 4] };
    let out_side = if transposed { 12 } else { 3 };
    let x0 = g.signed(&input_shape);
    let v0 = g.signed(&wshape);
    let g0 = g.uniform(&[cout], 0.5, 1.5);
    let b0 = g.signed(&[cout]);
    let r = probe_weights(g, &[1, cout, out_side, out_side]);
    let base = if transposed { "conv_transpose2d" } else { "conv2d" };
    let parts = [x0, v0, g0, b0];
    for (which, part) in ["input", "v", "g", "bias"].iter().enumerate() {
        let parts_c = parts.clone();
        let r = r.clone();
        s.add(&format!("{base}/{part}"), parts[which].clone(), eps, tol, move |t, var| {
            let vars: Vec<Var> = (0..4)
                .map(|i| if i == which { var } else { constant(t, &parts_c[i]) })
                .collect();
            let y = if transposed {
                t.conv_transpose2d_wn(vars[0], vars[1], vars[2], vars[3], 2, 1)?
            } else {
                t.conv2d_wn(vars[0], vars[1], vars[2], vars[3], 2, 1)?
            };
            probe(t, y, &r)
        });
    }
}

fn loss_cases(s: &mut GradCheckSuite, g: &mut Gen) {
    let (eps, tol) = (ORACLE_EPSILON, ORACLE_TOLERANCE);
    let d_fake = g.uniform(&[2, 1, 2, 2], 0.05, 0.95);
    {
        let d_fake = d_fake.clone();
        s.add("loss_cgan_d/real", g.uniform(&[2, 1, 2, 2], 0.05, 0.95), eps, tol, move |t, x| {
            let f = constant(t, &d_fake);
            loss_cgan_d(t, x, f)
        });
    }
    {
        let d_real = g.uniform(&[2, 1, 2, 2], 0.05, 0.95);
        s.add("loss_cgan_d/fake", d_fake.clone(), eps, tol, move |t, x| {
            let r = constant(t, &d_real);
            loss_cgan_d(t, r, x)
        });
    }
    s.add("loss_cgan_g", d_fake, eps, tol, loss_cgan_g);

    let substrate = half_white_substrate(g);
    {
        let sub = substrate.clone();
        s.add("loss_mask", g.signed(&[1, 3, 4, 4]), eps, tol, move |t, x| {
            let sv = constant(t, &sub);
            loss_mask(t, x, sv, 0.9)
        });
    }

    let probs = g.uniform(&[2, 5], 0.05, 0.95);
    let target = TargetVector::from_indices(5, &[1, 3]).unwrap();
    {
        let t1 = target.clone();
        s.add("positive_diff", probs.clone(), eps, tol, move |t, v| {
            let p = positive_diff(t, v, &t1)?;
            let l = linear_log_penalty(t, p)?;
            Ok(t.mean(l))
        });
    }
    {
        let t1 = target.clone();
        s.add("negative_diff", probs.clone(), eps, tol, move |t, v| {
            let n = negative_diff(t, v, &t1)?;
            let l = linear_log_penalty(t, n)?;
            Ok(t.mean(l))
        });
    }
    s.add("linear_log_penalty", g.uniform(&[2, 5], 0.0, 0.9), eps, tol, |t, x| {
        let l = linear_log_penalty(t, x)?;
        Ok(t.mean(l))
    });

    // Crops: the checked crop dominates the others for every row.
    let low = [g.uniform(&[2, 5], 0.0, 0.1), g.uniform(&[2, 5], 0.0, 0.1)];
    {
        let low = low.clone();
        let t1 = TargetVector::from_indices(5, &[2]).unwrap();
        s.add("loss_vgg/c_r", probs.clone(), eps, tol, move |t, c_r| {
            let crops: Vec<Var> = low.iter().map(|c| constant(t, c)).collect();
            let VggTerms { l_vgg, .. } = loss_vgg(t, c_r, &crops, &t1)?;
            Ok(l_vgg)
        });
    }
    {
        let t1 = TargetVector::from_indices(5, &[2]).unwrap();
        s.add("loss_vgg/crop", g.uniform(&[2, 5], 0.4, 0.9), eps, tol, move |t, crop| {
            let c_r = constant(t, &probs);
            let mut crops: Vec<Var> = low.iter().map(|c| constant(t, c)).collect();
            crops.insert(1, crop);
            let VggTerms { l_vgg, .. } = loss_vgg(t, c_r, &crops, &t1)?;
            Ok(l_vgg)
        });
    }

    {
        let gen = g.signed(&[1, 3, 4, 4]);
        let target_img = gap_target(g, &gen);
        s.add("loss_substrate", gen, eps, tol, move |t, x| {
            let tv = constant(t, &target_img);
            loss_substrate(t, tv, x)
        });
    }

    // Whole generator objective, as a function of a tiny generated image
    // that feeds every term.
    {
        let mut gen = g.signed(&[1, 3, 8, 8]);
        // Rows that become white stay well inside (0, 1) so the substrate
        // gap there keeps clear of both the abs kink and the log clamp.
        for (i, v) in gen.data_mut().iter_mut().enumerate() {
            if (i / 8) % 8 < 3 {
                *v = v.abs().min(1.0 - 2.0 * MARGIN);
            }
        }
        let sub = {
            let mut sub = gap_target(g, &gen);
            for (i, v) in sub.data_mut().iter_mut().enumerate() {
                if (i / 8) % 8 < 3 {
                    *v = 1.0;
                }
            }
            sub
        };
        let d_w = g.signed(&[1, 3, 4, 4]);
        let cls_w = g.signed(&[4, 3 * 4 * 4]);
        let t1 = TargetVector::from_indices(4, &[0]).unwrap();
        s.add("loss_total", gen, eps, tol, move |t, x| {
            let sv = constant(t, &sub);
            // A fixed linear "discriminator" and "classifier".
            let dw = constant(t, &d_w);
            let zero1 = t.constant(&[1], vec![0.0])?;
            let d = t.conv2d(x, dw, zero1, 2, 1)?;
            let d = t.sigmoid(d);
            let cgan_g = loss_cgan_g(t, d)?;
            let mask = loss_mask(t, x, sv, 0.9)?;
            let cw = constant(t, &cls_w);
            let zero4 = t.constant(&[4], vec![0.0; 4])?;
            let classify = |t: &mut Tape<f64>, img: Var| -> Result<Var> {
                let flat = t.reshape(img, &[1, 48])?;
                let logits = t.linear(flat, cw, zero4)?;
                t.softmax(logits)
            };
            let small = t.resize_bilinear(x, 4, 4)?;
            let c_r = classify(t, small)?;
            let crops = [(0, 0), (3, 4)]
                .iter()
                .map(|&(top, left)| {
                    let c = t.crop(x, top, left, 4, 4)?;
                    classify(t, c)
                })
                .collect::<Result<Vec<_>>>()?;
            let vgg = loss_vgg(t, c_r, &crops, &t1)?;
            let sub_l = loss_substrate(t, sv, x)?;
            let terms = GeneratorTerms {
                cgan_g,
                mask,
                vgg,
                sub: sub_l,
            };
            let (total, _) = loss_total(t, &terms, 0.0, &LossWeights::default())?;
            Ok(total)
        });
    }
}

/// A `[1, 3, 4, 4]` substrate whose top half is white.
fn half_white_substrate(g: &mut Gen) -> Tensor<f64> {
    let mut sub = g.uniform(&[1, 3, 4, 4], -1.0, 0.5);
    for (i, v) in sub.data_mut().iter_mut().enumerate() {
        if (i % 16) < 8 {
            *v = 1.0;
        }
    }
    sub
}

/// A target image differing from `gen` by gaps of magnitude in
/// [MARGIN, 1.5], clamped into [−1, 1] only where that keeps the margin.
fn gap_target(g: &mut Gen, gen: &Tensor<f64>) -> Tensor<f64> {
    let mut out = gen.clone();
    for v in out.data_mut() {
        let mag = g.0.random_range(MARGIN..1.0);
        *v = if *v + mag <= 1.0 { *v + mag } else { *v - mag };
    }
    out
}

/// Runs the suite, optionally with one backward rule deliberately broken.
pub fn run_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradCheckOutcome>> {
    standard_suite(seed).run(fault)
}
