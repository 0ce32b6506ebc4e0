//! Training losses. Every loss is a graph node so the same code serves
//! training (f32) and gradient checking (f64).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PosWeight {
    /// `clamp(N_neg / N_pos, min, max)` per sequence; 1 without positives.
    InverseFrequency { min: f64, max: f64 },
    Fixed { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_bce: f64,
    pub w_con: f64,
    pub w_gs: f64,
    pub w_aux: f64,
    pub w_tmp: f64,
    pub pos_weight: PosWeight,
    pub margin: f64,
    /// Cap on contrastive pairs per sequence; all pairs when unset.
    pub max_pairs: Option<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_bce: 1.0,
            w_con: 0.1,
            w_gs: 0.5,
            w_aux: 0.3,
            w_tmp: 0.1,
            pos_weight: PosWeight::InverseFrequency { min: 1.0, max: 20.0 },
            margin: 1.0,
            max_pairs: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_bce, self.w_con, self.w_gs, self.w_aux, self.w_tmp];
        if ws.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || !(self.w_bce > 0.0) {
            return Err(Error::Config(format!(
                "loss: weights must be finite and non-negative with w_bce > 0, got {ws:?}"
            )));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("loss: margin must be positive, got {}", self.margin)));
        }
        match self.pos_weight {
            PosWeight::InverseFrequency { min, max } if !(min > 0.0 && min <= max) => Err(Error::Config(
                format!("loss: pos_weight bounds must satisfy 0 < min <= max, got [{min}, {max}]"),
            )),
            PosWeight::Fixed { value } if !(value > 0.0) => {
                Err(Error::Config(format!("loss: pos_weight must be positive, got {value}")))
            }
            _ => Ok(()),
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.w_bce, self.w_con, self.w_gs, self.w_aux, self.w_tmp]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GumbelSchedule {
    pub tau0: f64,
    pub tau_min: f64,
    pub decay: f64,
}

impl Default for GumbelSchedule {
    fn default() -> Self {
        Self {
            tau0: 1.5,
            tau_min: 0.5,
            decay: 0.98,
        }
    }
}

impl GumbelSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau0 && self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!(
                "gumbel: need 0 < tau_min <= tau0 and decay in (0,1], got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `max(tau_min, tau0 * decay^epoch)`.
pub fn anneal_tau(epoch: usize, s: &GumbelSchedule) -> f64 {
    (s.tau0 * s.decay.powi(epoch.min(i32::MAX as usize) as i32)).max(s.tau_min)
}

pub fn pos_weight(y: &[u8], policy: PosWeight) -> f64 {
    match policy {
        PosWeight::Fixed { value } => value,
        PosWeight::InverseFrequency { min, max } => {
            let pos = y.iter().filter(|&&v| v == 1).count();
            if pos == 0 {
                return 1.0;
            }
            let neg = y.len() - pos;
            (neg as f64 / pos as f64).clamp(min, max)
        }
    }
}

fn column<T: Real>(g: &mut Graph<T>, v: impl Iterator<Item = f64>, n: usize) -> Var {
    let data: Vec<T> = v.map(T::of_f64).collect();
    g.constant(Tensor::new(&[n, 1], data).expect("column length"))
}

fn check_len<T: Real>(g: &Graph<T>, op: &'static str, z: Var, y: &[u8]) -> Result<usize> {
    let n = g.value(z).len();
    if n != y.len() || n == 0 {
        return Err(Error::invalid(op, format!("{n} logits for {} labels", y.len())));
    }
    Ok(n)
}

/// Mean of `-[w·y·log σ(z) + (1-y)·log σ(-z)]`.
pub fn bce_weighted<T: Real>(g: &mut Graph<T>, z: Var, y: &[u8], pos_weight: f64) -> Result<Var> {
    let n = check_len(g, "bce", z, y)?;
    let z = g.reshape(z, &[n, 1])?;
    let a = column(g, y.iter().map(|&v| pos_weight * v as f64), n);
    let b = column(g, y.iter().map(|&v| 1.0 - v as f64), n);
    let lp = g.log_sigmoid(z)?;
    let nz = g.neg(z)?;
    let ln = g.log_sigmoid(nz)?;
    let t1 = g.mul(lp, a)?;
    let t2 = g.mul(ln, b)?;
    let s = g.add(t1, t2)?;
    let m = g.mean(s)?;
    g.neg(m)
}

/// Margin contrastive loss over all unordered pairs of `H`'s rows after
/// row-wise l2 normalisation. Zero for fewer than two rows.
pub fn contrastive<T: Real>(g: &mut Graph<T>, h: Var, y: &[u8], margin: f64) -> Result<Var> {
    contrastive_subsampled(g, h, y, margin, None)
}

/// [`contrastive`] over at most `max_pairs` pairs, taken at a fixed stride
/// through the row-major enumeration of `i < j`.
pub fn contrastive_subsampled<T: Real>(
    g: &mut Graph<T>,
    h: Var,
    y: &[u8],
    margin: f64,
    max_pairs: Option<usize>,
) -> Result<Var> {
    let (n, _) = match *g.shape(h) {
        [n, d] => (n, d),
        ref s => return Err(Error::invalid("contrastive", format!("expected [T, D], got {s:?}"))),
    };
    if n != y.len() {
        return Err(Error::invalid("contrastive", format!("{n} rows for {} labels", y.len())));
    }
    if n < 2 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let sq = g.square(h)?;
    let norm2 = g.sum_cols(sq)?;
    let norm2 = g.offset(norm2, T::of_f64(1e-24))?;
    let norm = g.sqrt(norm2)?;
    let hn = g.div(h, norm)?;
    let d2 = g.pairwise_sq_dist(hn)?;
    let all = n * (n - 1) / 2;
    let stride = match max_pairs {
        Some(m) if m > 0 && m < all => all.div_ceil(m),
        _ => 1,
    };
    let mut same = vec![T::zero(); n * n];
    let mut diff = vec![T::zero(); n * n];
    let mut idx = 0usize;
    let mut used = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            idx += 1;
            if (idx - 1) % stride != 0 {
                continue;
            }
            used += 1;
            if y[i] == y[j] {
                same[i * n + j] = T::one();
            } else {
                diff[i * n + j] = T::one();
            }
        }
    }
    let same = g.constant(Tensor::new(&[n, n], same)?);
    let diff = g.constant(Tensor::new(&[n, n], diff)?);
    let pos = g.mul(d2, same)?;
    let d = g.sqrt(d2)?;
    let gap = g.neg(d)?;
    let gap = g.offset(gap, T::of_f64(margin))?;
    let hinge = g.relu(gap)?;
    let hinge = g.square(hinge)?;
    let neg = g.mul(hinge, diff)?;
    let total = g.add(pos, neg)?;
    let s = g.sum(total)?;
    g.scale(s, T::of_f64(1.0 / used as f64))
}

/// Per-frame `g1 - g0` for two-class Gumbel noise.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise(pub Vec<f64>);

impl GumbelNoise {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// `g = -ln(-ln u)`, `u ~ U(0,1)`, drawn as `(g0, g1)` per frame.
    pub fn sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut gumbel = || {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        };
        Self(
            (0..n)
                .map(|_| {
                    let g0 = gumbel();
                    let g1 = gumbel();
                    g1 - g0
                })
                .collect(),
        )
    }
}

/// Relaxed logit `u = (z + g1 - g0) / tau`, so `p̃ = σ(u)`.
pub fn gumbel_logits<T: Real>(g: &mut Graph<T>, z: Var, tau: f64, noise: &GumbelNoise) -> Result<Var> {
    let n = g.value(z).len();
    if noise.0.len() != n {
        return Err(Error::invalid("gumbel", format!("{} noise draws for {n} logits", noise.0.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("gumbel", format!("tau must be positive, got {tau}")));
    }
    let z = g.reshape(z, &[n, 1])?;
    let e = column(g, noise.0.iter().copied(), n);
    let u = g.add(z, e)?;
    g.scale(u, T::of_f64(1.0 / tau))
}

pub fn gumbel_soft<T: Real>(g: &mut Graph<T>, z: Var, tau: f64, noise: &GumbelNoise) -> Result<Var> {
    let u = gumbel_logits(g, z, tau, noise)?;
    g.sigmoid(u)
}

/// Mean plain BCE over stage logits; zero without stages.
pub fn aux_deep_supervision<T: Real>(g: &mut Graph<T>, stages: &[Var], y: &[u8]) -> Result<Var> {
    if stages.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let mut acc = None;
    for &z in stages {
        let l = bce_weighted(g, z, y, 1.0)?;
        acc = Some(match acc {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    g.scale(acc.expect("non-empty"), T::of_f64(1.0 / stages.len() as f64))
}

/// `1/(T-1) Σ (p_t - p_{t-1})^2`; zero for fewer than two frames.
pub fn temporal_smoothness<T: Real>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    let n = g.value(p).len();
    if n < 2 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let p = g.reshape(p, &[n, 1])?;
    let a = g.slice(p, 0, 1, n - 1)?;
    let b = g.slice(p, 0, 0, n - 1)?;
    let d = g.sub(a, b)?;
    let d = g.square(d)?;
    g.mean(d)
}

pub const TERM_NAMES: [&str; 5] = ["bce", "con", "gs", "aux", "tmp"];

/// The five loss terms, in [`TERM_NAMES`] order.
#[derive(Clone, Copy, Debug)]
pub struct Terms(pub [Var; 5]);

/// Weighted sum of the terms; a non-finite term is an error naming it.
pub fn total_loss<T: Real>(g: &mut Graph<T>, terms: &Terms, w: &LossWeights) -> Result<Var> {
    let weights = w.as_array();
    let mut acc: Option<Var> = None;
    for ((&v, name), wi) in terms.0.iter().zip(TERM_NAMES).zip(weights) {
        let val = g.value(v);
        if val.len() != 1 {
            return Err(Error::NotScalar(val.shape().to_vec()));
        }
        if !val.item().is_finite() {
            return Err(Error::Config(format!("loss term {name} is not finite")));
        }
        let s = g.scale(v, T::of_f64(wi))?;
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    Ok(acc.expect("five terms"))
}

/// Inputs needed to assemble the objective for one sequence.
pub struct LossInputs<'a> {
    pub logits: Var,
    pub embeddings: Var,
    pub stage_logits: &'a [Var],
    pub labels: &'a [u8],
    pub tau: f64,
    pub noise: &'a GumbelNoise,
}

/// All five terms and their weighted total.
pub fn objective<T: Real>(g: &mut Graph<T>, x: &LossInputs<'_>, w: &LossWeights) -> Result<(Var, Terms)> {
    let pw = pos_weight(x.labels, w.pos_weight);
    let bce = bce_weighted(g, x.logits, x.labels, pw)?;
    let con = contrastive_subsampled(g, x.embeddings, x.labels, w.margin, w.max_pairs)?;
    let u = gumbel_logits(g, x.logits, x.tau, x.noise)?;
    let gs = bce_weighted(g, u, x.labels, 1.0)?;
    let aux = aux_deep_supervision(g, x.stage_logits, x.labels)?;
    let soft = g.sigmoid(u)?;
    let tmp = temporal_smoothness(g, soft)?;
    let terms = Terms([bce, con, gs, aux, tmp]);
    let total = total_loss(g, &terms, w)?;
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::ExecMode;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    fn col(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.constant(Tensor::new(&[v.len(), 1], v.to_vec()).unwrap())
    }

    #[test]
    fn bce_unit_values() {
        let v = eval(|g| {
            let z = col(g, &[0.0]);
            bce_weighted(g, z, &[1], 1.0)
        });
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let v = eval(|g| {
            let z = col(g, &[30.0]);
            bce_weighted(g, z, &[1], 1.0)
        });
        assert!(v <= 1e-12);
        let v = eval(|g| {
            let z = col(g, &[-40.0]);
            bce_weighted(g, z, &[1], 1.0)
        });
        assert!((v - 40.0).abs() < 1e-9);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.random_range(1..10);
            let z: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let pw = rng.random_range(1.0..5.0);
            let want: f64 = z
                .iter()
                .zip(&y)
                .map(|(&z, &y)| {
                    let s = 1.0 / (1.0 + (-z).exp());
                    -(pw * y as f64 * s.ln() + (1.0 - y as f64) * (1.0 - s).ln())
                })
                .sum::<f64>()
                / n as f64;
            let got = eval(|g| {
                let zv = col(g, &z);
                bce_weighted(g, zv, &y, pw)
            });
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn pos_weight_policy() {
        let p = LossWeights::default().pos_weight;
        assert_eq!(pos_weight(&[0, 0, 0, 1], p), 3.0);
        assert_eq!(pos_weight(&[0; 5], p), 1.0);
        assert_eq!(pos_weight(&[1, 1, 0], p), 1.0);
        let mut y = vec![0u8; 100];
        y[0] = 1;
        assert_eq!(pos_weight(&y, p), 20.0);
    }

    fn con(rows: &[Vec<f64>], y: &[u8], m: f64) -> f64 {
        eval(|g| {
            let h = g.constant(Tensor::from_rows(rows).unwrap());
            contrastive(g, h, y, m)
        })
    }

    #[test]
    fn contrastive_analytic_pairs() {
        assert_eq!(con(&[vec![0.6, 0.8], vec![0.6, 0.8]], &[1, 1], 1.0), 0.0);
        assert_eq!(con(&[vec![0.6, 0.8], vec![0.6, 0.8]], &[0, 1], 1.0), 1.0);
        assert_eq!(con(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1], 1.0), 0.0);
        assert_eq!(con(&[vec![1.0, 0.0]], &[1], 1.0), 0.0);
    }

    #[test]
    fn contrastive_matches_pair_enumeration_and_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let n = rng.random_range(2..8);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let unit: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let s = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    r.iter().map(|v| v / s).collect()
                })
                .collect();
            let mut want = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    let d = ((unit[i][0] - unit[j][0]).powi(2) + (unit[i][1] - unit[j][1]).powi(2)).sqrt();
                    want += if y[i] == y[j] { d * d } else { (1.0 - d).max(0.0).powi(2) };
                    pairs += 1.0;
                }
            }
            want /= pairs;
            let got = con(&rows, &y, 1.0);
            assert!((got - want).abs() < 1e-9);
            let a: f64 = rng.random_range(0.0..6.28);
            let rot: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| vec![a.cos() * r[0] - a.sin() * r[1], a.sin() * r[0] + a.cos() * r[1]])
                .collect();
            assert!((con(&rot, &y, 1.0) - got).abs() < 1e-6);
        }
    }

    #[test]
    fn subsampling_uses_a_stride_and_defaults_to_all_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-1.0..1.0), 1.0]).collect();
        let y = [0, 1, 0, 1, 1, 0];
        let full = con(&rows, &y, 1.0);
        let capped = |m| {
            eval(|g| {
                let h = g.constant(Tensor::from_rows(&rows).unwrap());
                contrastive_subsampled(g, h, &y, 1.0, m)
            })
        };
        assert_eq!(capped(Some(100)), full);
        assert_eq!(capped(None), full);
        assert_ne!(capped(Some(4)), full);
    }

    #[test]
    fn gumbel_without_noise_is_tempered_sigmoid() {
        for &(z, tau) in &[(0.3, 1.0), (-1.2, 0.5), (2.0, 1.5)] {
            let v = eval(|g| {
                let zv = col(g, &[z]);
                gumbel_soft(g, zv, tau, &GumbelNoise::zeros(1))
            });
            assert!((v - 1.0 / (1.0 + (-z / tau).exp())).abs() < 1e-12);
        }
        let v = eval(|g| {
            let zv = col(g, &[2.0]);
            gumbel_soft(g, zv, 0.01, &GumbelNoise::zeros(1))
        });
        assert!(v >= 1.0 - 1e-8);
    }

    #[test]
    fn gumbel_hard_decision_rate_matches_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        for &z in &[-1.0f64, 0.0, 0.7] {
            let noise = GumbelNoise::sample(n, &mut rng);
            let hits = noise.0.iter().filter(|&&e| z + e > 0.0).count();
            let rate = hits as f64 / n as f64;
            assert!((rate - 1.0 / (1.0 + (-z).exp())).abs() < 0.01, "z={z} rate={rate}");
        }
    }

    #[test]
    fn gumbel_sampling_is_seeded() {
        let a = GumbelNoise::sample(10, &mut ChaCha8Rng::seed_from_u64(4));
        let b = GumbelNoise::sample(10, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn aux_examples() {
        let v = eval(|g| {
            let z = col(g, &[40.0, -40.0]);
            aux_deep_supervision(g, &[z], &[1, 0])
        });
        assert!(v < 1e-12);
        let z = [0.3, -0.4, 1.2];
        let y = [1, 0, 0];
        let one = eval(|g| {
            let a = col(g, &z);
            aux_deep_supervision(g, &[a], &y)
        });
        let two = eval(|g| {
            let a = col(g, &z);
            let b = col(g, &z);
            aux_deep_supervision(g, &[a, b], &y)
        });
        assert!((one - two).abs() < 1e-15);
        assert_eq!(eval(|g| aux_deep_supervision(g, &[], &y)), 0.0);
    }

    #[test]
    fn smoothness_examples() {
        assert_eq!(eval(|g| { let p = col(g, &[0.4; 6]); temporal_smoothness(g, p) }), 0.0);
        assert_eq!(eval(|g| { let p = col(g, &[0.0, 1.0, 0.0, 1.0]); temporal_smoothness(g, p) }), 1.0);
        assert_eq!(eval(|g| { let p = col(g, &[0.7]); temporal_smoothness(g, p) }), 0.0);
    }

    fn scalars(g: &mut Graph<f64>, v: [f64; 5]) -> Terms {
        Terms(v.map(|x| g.constant(Tensor::scalar(x))))
    }

    #[test]
    fn total_is_a_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let t: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..3.0));
            let w = LossWeights {
                w_bce: rng.random_range(0.1..2.0),
                w_con: rng.random_range(0.0..2.0),
                w_gs: rng.random_range(0.0..2.0),
                w_aux: rng.random_range(0.0..2.0),
                w_tmp: rng.random_range(0.0..2.0),
                ..LossWeights::default()
            };
            let want: f64 = t.iter().zip(w.as_array()).map(|(a, b)| a * b).sum();
            let got = eval(|g| { let ts = scalars(g, t); total_loss(g, &ts, &w) });
            assert!((got - want).abs() < 1e-12);
            let w2 = LossWeights {
                w_bce: 2.0 * w.w_bce,
                w_con: 2.0 * w.w_con,
                w_gs: 2.0 * w.w_gs,
                w_aux: 2.0 * w.w_aux,
                w_tmp: 2.0 * w.w_tmp,
                ..w.clone()
            };
            let doubled = eval(|g| { let ts = scalars(g, t); total_loss(g, &ts, &w2) });
            assert!((doubled - 2.0 * got).abs() < 1e-12);
        }
        let only_bce = LossWeights { w_con: 0.0, w_gs: 0.0, w_aux: 0.0, w_tmp: 0.0, ..LossWeights::default() };
        assert_eq!(eval(|g| { let ts = scalars(g, [0.4, 9.0, 9.0, 9.0, 9.0]); total_loss(g, &ts, &only_bce) }), 0.4);
    }

    #[test]
    fn non_finite_term_is_named() {
        let mut g = Graph::<f64>::new();
        let mut t = scalars(&mut g, [1.0; 5]);
        t.0[3] = g.constant(Tensor::scalar(f64::NAN));
        let err = total_loss(&mut g, &t, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("aux"), "{err}");
    }

    #[test]
    fn anneal_schedule() {
        let s = GumbelSchedule::default();
        assert_eq!(anneal_tau(0, &s), 1.5);
        assert!((anneal_tau(1, &s) - 1.47).abs() < 1e-12);
        assert_eq!(anneal_tau(200, &s), 0.5);
        let taus: Vec<f64> = (0..400).map(|e| anneal_tau(e, &s)).collect();
        assert!(taus.windows(2).all(|w| w[1] <= w[0]));
        assert!(taus.iter().all(|&t| (0.5..=1.5).contains(&t)));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 6;
        let y: Vec<u8> = vec![0, 1, 1, 0, 1, 0];
        let noise = GumbelNoise::sample(n, &mut rng);
        let params = vec![
            ("z".to_string(), Tensor::randn(&[n, 1], 1.5, &mut rng)),
            ("h".to_string(), Tensor::randn(&[n, 3], 1.0, &mut rng)),
            ("s".to_string(), Tensor::randn(&[n, 1], 1.0, &mut rng)),
        ];
        let w = LossWeights::default();
        let report = gradcheck(
            |g, v| {
                let stages = [v[2]];
                let inputs = LossInputs {
                    logits: v[0],
                    embeddings: v[1],
                    stage_logits: &stages,
                    labels: &y,
                    tau: 0.8,
                    noise: &noise,
                };
                Ok(objective(g, &inputs, &w)?.0)
            },
            &params,
            1e-4,
            ExecMode::Parallel,
        )
        .unwrap();
        assert!(report.passed, "{:?} max {}", report.failure, report.max_rel_error());
    }

    #[test]
    fn every_loss_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.random_range(1..9);
            let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let noise = GumbelNoise::sample(n, &mut rng);
            let mut g = Graph::<f64>::new();
            let z = g.constant(Tensor::randn(&[n, 1], 3.0, &mut rng));
            let h = g.constant(Tensor::randn(&[n, 4], 1.0, &mut rng));
            let inputs = LossInputs {
                logits: z,
                embeddings: h,
                stage_logits: &[z],
                labels: &y,
                tau: 1.0,
                noise: &noise,
            };
            let (_, terms) = objective(&mut g, &inputs, &LossWeights::default()).unwrap();
            for v in terms.0 {
                assert!(g.value(v).item() >= 0.0);
            }
        }
    }
}
