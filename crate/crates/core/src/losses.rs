//! The four generator loss terms and their weighted combination.
//!
//! All image reductions are means, so magnitudes do not depend on resolution
//! and the 3 / 10 / 50 / 150 weighting carries over to small images. Every
//! log argument that can reach zero is clamped at [`LOG_CLAMP`] first.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::models::TargetVector;
use crate::tensor::{Real, Tape, Var};

pub const LOG_CLAMP: f64 = 1e-6;

/// Default threshold (in [−1, 1] space) above which every channel of a
/// substrate pixel must lie for the pixel to count as white background.
pub const WHITE_THRESHOLD: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_cgan: f64,
    pub w_mask: f64,
    pub w_vgg: f64,
    pub w_sub: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_cgan: 3.0,
            w_mask: 10.0,
            w_vgg: 50.0,
            w_sub: 150.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_cgan, self.w_mask, self.w_vgg, self.w_sub];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::shape(format!("loss weights must be finite and non-negative: {all:?}")));
        }
        Ok(())
    }
}

/// Scalar values of every loss component at one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_cgan_d: f64,
    pub l_cgan_g: f64,
    pub l_mask: f64,
    pub l_p: f64,
    pub l_n: f64,
    pub l_vgg: f64,
    pub l_sub: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_cgan_d,l_cgan_g,l_mask,l_p,l_n,l_vgg,l_sub,total";

    pub fn csv_line(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{},{}",
            self.l_cgan_d, self.l_cgan_g, self.l_mask, self.l_p, self.l_n, self.l_vgg, self.l_sub, self.total
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<(usize, LossReport)> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 9 {
            return Err(Error::shape(format!("log line has {} fields, expected 9", fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::shape(format!("bad number {:?} in log line", fields[i])))
        };
        let step = fields[0]
            .parse()
            .map_err(|_| Error::shape(format!("bad step {:?} in log line", fields[0])))?;
        Ok((
            step,
            LossReport {
                l_cgan_d: num(1)?,
                l_cgan_g: num(2)?,
                l_mask: num(3)?,
                l_p: num(4)?,
                l_n: num(5)?,
                l_vgg: num(6)?,
                l_sub: num(7)?,
                total: num(8)?,
            },
        ))
    }

    pub fn components(&self) -> [(&'static str, f64); 8] {
        [
            ("l_cgan_d", self.l_cgan_d),
            ("l_cgan_g", self.l_cgan_g),
            ("l_mask", self.l_mask),
            ("l_p", self.l_p),
            ("l_n", self.l_n),
            ("l_vgg", self.l_vgg),
            ("l_sub", self.l_sub),
            ("total", self.total),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|(_, v)| v.is_finite())
    }
}

/// `log(max(x, LOG_CLAMP))`.
pub fn clamped_log<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let c = tape.clamp_min(x, T::lit(LOG_CLAMP));
    tape.log(c)
}

/// `1 − x`
fn one_minus<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    let n = tape.neg(x);
    tape.add_scalar(n, T::one())
}

/// Discriminator objective `−mean log D(x, y) − mean log(1 − D(x, G(x, z)))`.
pub fn loss_cgan_d<T: Real>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let lr = clamped_log(tape, d_real)?;
    let lr = tape.mean(lr);
    let inv = one_minus(tape, d_fake);
    let lf = clamped_log(tape, inv)?;
    let lf = tape.mean(lf);
    let s = tape.add(lr, lf)?;
    Ok(tape.neg(s))
}

/// Non-saturating generator adversarial loss `−mean log D(x, G(x, z))`.
pub fn loss_cgan_g<T: Real>(tape: &mut Tape<T>, d_fake: Var) -> Result<Var> {
    let l = clamped_log(tape, d_fake)?;
    let l = tape.mean(l);
    Ok(tape.neg(l))
}

/// `[B, 3, H, W]` indicator of pixels whose every channel is ≥ `threshold`
/// (all three channels of such a pixel are set).
pub fn white_mask<T: Real>(substrate: &[T], shape: &[usize], threshold: f64) -> Result<Vec<T>> {
    let [b, c, h, w] = *shape else {
        return Err(Error::shape(format!("white_mask: expected [B, C, H, W], got {shape:?}")));
    };
    let plane = h * w;
    let thr = T::lit(threshold);
    let mut mask = vec![T::zero(); substrate.len()];
    for n in 0..b {
        let img = &substrate[n * c * plane..(n + 1) * c * plane];
        for p in 0..plane {
            if (0..c).all(|ch| img[ch * plane + p] >= thr) {
                for ch in 0..c {
                    mask[n * c * plane + ch * plane + p] = T::one();
                }
            }
        }
    }
    Ok(mask)
}

/// Mean of `(1 − G)/2` over the substrate's white pixel-channels; zero when
/// the substrate has no white pixel.
pub fn loss_mask<T: Real>(tape: &mut Tape<T>, generated: Var, substrate: Var, white_threshold: f64) -> Result<Var> {
    if tape.shape(generated) != tape.shape(substrate) {
        return Err(Error::shape("loss_mask: generated and substrate shapes differ"));
    }
    let shape = tape.shape(substrate).to_vec();
    let mask = white_mask(tape.value(substrate), &shape, white_threshold)?;
    let count = mask.iter().filter(|&&m| m > T::zero()).count();
    let gap = tape.scale(generated, T::lit(-0.5));
    let gap = tape.add_scalar(gap, T::lit(0.5));
    let m = tape.constant(&shape, mask)?;
    let masked = tape.mul(gap, m)?;
    let s = tape.sum(masked);
    Ok(if count == 0 {
        tape.scale(s, T::zero())
    } else {
        tape.scale(s, T::one() / T::lit(count as f64))
    })
}

fn target_matrix<T: Real>(tape: &mut Tape<T>, v: Var, t: &TargetVector, complement: bool) -> Result<Var> {
    let [rows, n] = *tape.shape(v) else {
        return Err(Error::shape(format!("expected a [B, n] probability matrix, got {:?}", tape.shape(v))));
    };
    if n != t.len() {
        return Err(Error::shape(format!(
            "probability vector of length {n} against a target of length {}",
            t.len()
        )));
    }
    let row: Vec<T> = t
        .to_reals::<T>()
        .into_iter()
        .map(|x| if complement { T::one() - x } else { x })
        .collect();
    let data = row.iter().copied().cycle().take(rows * n).collect();
    tape.constant(&[rows, n], data)
}

fn masked_gap<T: Real>(tape: &mut Tape<T>, v: Var, t: &TargetVector, complement: bool) -> Result<Var> {
    let tm = target_matrix(tape, v, t, false)?;
    let gap = tape.sub(tm, v)?;
    let gap = tape.abs(gap);
    let sel = if complement {
        target_matrix(tape, v, t, true)?
    } else {
        tm
    };
    tape.mul(gap, sel)
}

/// `|t − v| ⊙ t`, row by row of `v [B, n]`.
pub fn positive_diff<T: Real>(tape: &mut Tape<T>, v: Var, t: &TargetVector) -> Result<Var> {
    masked_gap(tape, v, t, false)
}

/// `|t − v| ⊙ (1 − t)`, row by row of `v [B, n]`.
pub fn negative_diff<T: Real>(tape: &mut Tape<T>, v: Var, t: &TargetVector) -> Result<Var> {
    masked_gap(tape, v, t, true)
}

/// Row-wise `(1/n) Σ (xᵢ − log(1 − xᵢ))` for `x [B, n]`, giving `[B]`.
pub fn linear_log_penalty<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let inv = one_minus(tape, x);
    let lg = clamped_log(tape, inv)?;
    let terms = tape.sub(x, lg)?;
    tape.row_mean(terms)
}

#[derive(Clone, Copy, Debug)]
pub struct VggTerms {
    pub l_p: Var,
    pub l_n: Var,
    pub l_vgg: Var,
}

/// Class-presence loss: positives judged on the resized whole image,
/// negatives on the worst of the crops. Rows are batch items; the result is
/// averaged over the batch.
pub fn loss_vgg<T: Real>(tape: &mut Tape<T>, c_r: Var, crops: &[Var], t: &TargetVector) -> Result<VggTerms> {
    if crops.is_empty() {
        return Err(Error::shape("loss_vgg needs at least one crop"));
    }
    let p = positive_diff(tape, c_r, t)?;
    let lp = linear_log_penalty(tape, p)?;
    let l_p = tape.mean(lp);
    let per_crop = crops
        .iter()
        .map(|&c| {
            let nd = negative_diff(tape, c, t)?;
            linear_log_penalty(tape, nd)
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = tape.max_of(&per_crop)?;
    let l_n = tape.mean(worst);
    let l_vgg = tape.add(l_p, l_n)?;
    Ok(VggTerms { l_p, l_n, l_vgg })
}

/// `count` distinct top-left offsets of `crop × crop` windows in a
/// `size × size` image, uniform without replacement.
pub fn crop_offsets<R: Rng + ?Sized>(size: usize, crop: usize, count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if crop == 0 || crop > size {
        return Err(Error::shape(format!("crop size {crop} does not fit image size {size}")));
    }
    let side = size - crop + 1;
    if side * side < count {
        return Err(Error::shape(format!(
            "only {} distinct {crop}x{crop} crops exist in a {size}x{size} image, {count} requested",
            side * side
        )));
    }
    Ok(index::sample(rng, side * side, count)
        .into_iter()
        .map(|i| (i / side, i % side))
        .collect())
}

/// Random distinct square crops of `image [B, 3, S, S]` (same offsets for
/// every batch item).
pub fn sample_crops<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    image: Var,
    crop_size: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Var>> {
    let [_, _, h, w] = *tape.shape(image) else {
        return Err(Error::shape("sample_crops expects [B, C, H, W]"));
    };
    if h != w {
        return Err(Error::shape("sample_crops expects square images"));
    }
    crop_offsets(h, crop_size, count, rng)?
        .into_iter()
        .map(|(top, left)| tape.crop(image, top, left, crop_size, crop_size))
        .collect()
}

/// Mean over pixel-channels of `|T − G| − log(1 − ((T − G)/2)²)`.
pub fn loss_substrate<T: Real>(tape: &mut Tape<T>, substrate: Var, generated: Var) -> Result<Var> {
    let d = tape.sub(substrate, generated)?;
    let a = tape.abs(d);
    let half = tape.scale(d, T::lit(0.5));
    let sq = tape.square(half);
    let inv = one_minus(tape, sq);
    let lg = clamped_log(tape, inv)?;
    let terms = tape.sub(a, lg)?;
    Ok(tape.mean(terms))
}

/// Generator-side loss components recorded on one tape.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub cgan_g: Var,
    pub mask: Var,
    pub vgg: VggTerms,
    pub sub: Var,
}

/// Weighted generator objective plus the full report. The discriminator's
/// own objective enters only the report.
pub fn loss_total<T: Real>(
    tape: &mut Tape<T>,
    terms: &GeneratorTerms,
    l_cgan_d: f64,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let parts = [
        (terms.cgan_g, weights.w_cgan),
        (terms.mask, weights.w_mask),
        (terms.vgg.l_vgg, weights.w_vgg),
        (terms.sub, weights.w_sub),
    ];
    let mut total = tape.scale(parts[0].0, T::lit(parts[0].1));
    for &(v, w) in &parts[1..] {
        let s = tape.scale(v, T::lit(w));
        total = tape.add(total, s)?;
    }
    let val = |v: Var| tape.scalar(v).as_f64();
    let report = LossReport::from_components(
        l_cgan_d,
        val(terms.cgan_g),
        val(terms.mask),
        val(terms.vgg.l_p),
        val(terms.vgg.l_n),
        val(terms.sub),
        weights,
    );
    Ok((total, report))
}

impl LossReport {
    /// Builds a report, deriving `l_vgg = l_p + l_n` and the weighted total.
    pub fn from_components(
        l_cgan_d: f64,
        l_cgan_g: f64,
        l_mask: f64,
        l_p: f64,
        l_n: f64,
        l_sub: f64,
        w: &LossWeights,
    ) -> Self {
        let l_vgg = l_p + l_n;
        LossReport {
            l_cgan_d,
            l_cgan_g,
            l_mask,
            l_p,
            l_n,
            l_vgg,
            l_sub,
            total: w.w_cgan * l_cgan_g + w.w_mask * l_mask + w.w_vgg * l_vgg + w.w_sub * l_sub,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.constant(&[1, v.len()], v.to_vec()).unwrap()
    }

    fn scalar_of(tape: &mut Tape<f64>, shape: &[usize], v: f64) -> Var {
        let n = shape.iter().product();
        tape.constant(shape, vec![v; n]).unwrap()
    }

    #[test]
    fn cgan_d_values() {
        let mut tape = Tape::<f64>::new();
        let half = scalar_of(&mut tape, &[1, 1, 2, 2], 0.5);
        let l = loss_cgan_d(&mut tape, half, half).unwrap();
        assert!((tape.scalar(l) - 2.0 * 2f64.ln()).abs() < 1e-12);

        let real = scalar_of(&mut tape, &[1, 1, 2, 2], 1.0 - 1e-6);
        let fake = scalar_of(&mut tape, &[1, 1, 2, 2], 1e-6);
        let l = loss_cgan_d(&mut tape, real, fake).unwrap();
        let want = -2.0 * (1.0f64 - 1e-6).ln();
        assert!((tape.scalar(l) - want).abs() < 1e-12);
        assert!(tape.scalar(l) < 3e-6);

        let zero = scalar_of(&mut tape, &[1, 1, 2, 2], 0.0);
        let l = loss_cgan_d(&mut tape, zero, zero).unwrap();
        assert!(tape.scalar(l).is_finite());
    }

    #[test]
    fn cgan_g_values_and_sign() {
        let mut tape = Tape::<f64>::new();
        let half = tape.leaf(&crate::Tensor::new(&[1, 1, 2, 2], vec![0.5; 4], true).unwrap());
        let l = loss_cgan_g(&mut tape, half).unwrap();
        assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-12);
        tape.backward(l).unwrap();
        assert!(tape.grad(half).unwrap().iter().all(|&g| g < 0.0));
        let near_one = scalar_of(&mut tape, &[1, 1, 1, 1], 1.0 - 1e-12);
        let l = loss_cgan_g(&mut tape, near_one).unwrap();
        assert!(tape.scalar(l) < 1e-9);
    }

    #[test]
    fn mask_values() {
        let mut tape = Tape::<f64>::new();
        let white = scalar_of(&mut tape, &[1, 3, 4, 4], 1.0);
        let black = scalar_of(&mut tape, &[1, 3, 4, 4], -1.0);
        let l = loss_mask(&mut tape, white, white, WHITE_THRESHOLD).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let l = loss_mask(&mut tape, black, white, WHITE_THRESHOLD).unwrap();
        assert_eq!(tape.scalar(l), 1.0);
        let grey = scalar_of(&mut tape, &[1, 3, 4, 4], 0.2);
        let l = loss_mask(&mut tape, black, grey, WHITE_THRESHOLD).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn mask_requires_every_channel_white() {
        let mut data = vec![1.0; 3 * 4];
        data[4] = 0.0; // green channel of pixel 0
        let m = white_mask(&data, &[1, 3, 2, 2], 0.9).unwrap();
        assert_eq!(m, vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn diff_examples() {
        let mut tape = Tape::<f64>::new();
        let t = TargetVector::from_indices(5, &[0]).unwrap();
        let v = row(&mut tape, &[0.9, 0.8, 0.0, 0.0, 0.0]);
        let p = positive_diff(&mut tape, v, &t).unwrap();
        let n = negative_diff(&mut tape, v, &t).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(tape.value(p), &[0.1, 0.0, 0.0, 0.0, 0.0]));
        assert!(close(tape.value(n), &[0.0, 0.8, 0.0, 0.0, 0.0]));

        let zero = TargetVector::zeros(5);
        let v = row(&mut tape, &[0.3, 0.1, 0.2, 0.5, 0.9]);
        let p = positive_diff(&mut tape, v, &zero).unwrap();
        assert!(tape.value(p).iter().all(|&x| x == 0.0));
        let n = negative_diff(&mut tape, v, &zero).unwrap();
        assert_eq!(tape.value(n), tape.value(v));

        let ones = TargetVector::new(vec![true; 5]);
        let n = negative_diff(&mut tape, v, &ones).unwrap();
        assert!(tape.value(n).iter().all(|&x| x == 0.0));

        let short = row(&mut tape, &[0.3, 0.1]);
        assert!(positive_diff(&mut tape, short, &ones).is_err());
    }

    #[test]
    fn penalty_values() {
        let mut tape = Tape::<f64>::new();
        let z = row(&mut tape, &[0.0, 0.0, 0.0]);
        let l = linear_log_penalty(&mut tape, z).unwrap();
        assert_eq!(tape.value(l), &[0.0]);
        let h = row(&mut tape, &[0.5]);
        let l = linear_log_penalty(&mut tape, h).unwrap();
        assert!((tape.value(l)[0] - (0.5 + 2f64.ln())).abs() < 1e-12);
        let one = row(&mut tape, &[1.0]);
        let l = linear_log_penalty(&mut tape, one).unwrap();
        assert!((tape.value(l)[0] - (1.0 - 1e-6f64.ln())).abs() < 1e-9);
        assert!((tape.value(l)[0] - 14.8155).abs() < 1e-4);
    }

    #[test]
    fn vgg_examples() {
        let mut tape = Tape::<f64>::new();
        let t = TargetVector::from_indices(5, &[0]).unwrap();
        let c = row(&mut tape, &[1.0, 0.0, 0.0, 0.0, 0.0]);
        let terms = loss_vgg(&mut tape, c, &[c, c, c], &t).unwrap();
        assert_eq!(tape.scalar(terms.l_vgg), 0.0);

        let null = TargetVector::zeros(5);
        let crop = row(&mut tape, &[0.0, 0.0, 0.2, 0.0, 0.0]);
        let terms = loss_vgg(&mut tape, c, &[crop], &null).unwrap();
        assert_eq!(tape.scalar(terms.l_p), 0.0);
        assert!(tape.scalar(terms.l_n) > 0.0);
        assert!(loss_vgg(&mut tape, c, &[], &null).is_err());
    }

    #[test]
    fn crop_offsets_are_distinct_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let o = crop_offsets(64, 32, 3, &mut rng).unwrap();
            assert!(o.iter().all(|&(y, x)| y <= 32 && x <= 32));
            assert!(o[0] != o[1] && o[1] != o[2] && o[0] != o[2]);
        }
        assert!(crop_offsets(32, 32, 3, &mut rng).is_err());
        assert!(crop_offsets(16, 32, 1, &mut rng).is_err());
        assert_eq!(crop_offsets(32, 32, 1, &mut rng).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn substrate_values() {
        let mut tape = Tape::<f64>::new();
        let t = scalar_of(&mut tape, &[1], 1.0);
        let g0 = scalar_of(&mut tape, &[1], 0.0);
        let l = loss_substrate(&mut tape, t, g0).unwrap();
        assert!((tape.scalar(l) - (1.0 - 0.75f64.ln())).abs() < 1e-12);
        let gm = scalar_of(&mut tape, &[1], -1.0);
        let l = loss_substrate(&mut tape, t, gm).unwrap();
        assert!((tape.scalar(l) - (2.0 - 1e-6f64.ln())).abs() < 1e-9);
        let l = loss_substrate(&mut tape, t, t).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn report_arithmetic() {
        let w = LossWeights::default();
        let r = LossReport::from_components(0.0, 1.0, 1.0, 0.5, 0.5, 1.0, &w);
        assert_eq!(r.total, 213.0);
        assert_eq!(r.l_vgg, 1.0);
        let pure = LossWeights {
            w_cgan: 1.0,
            w_mask: 0.0,
            w_vgg: 0.0,
            w_sub: 0.0,
        };
        let r = LossReport::from_components(0.0, 0.7, 1.0, 0.5, 0.5, 1.0, &pure);
        assert_eq!(r.total, 0.7);
        let bad = LossWeights { w_mask: -1.0, ..w };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let r = LossReport::from_components(1.25, 0.5, 0.125, 0.25, 0.75, 2.0, &LossWeights::default());
        let line = r.csv_line(17);
        assert_eq!(LossReport::parse_csv_line(&line).unwrap(), (17, r));
    }
}
