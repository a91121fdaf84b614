//! Training losses expressed on the autodiff graph.
//!
//! Intrinsic tensors are batched `N × C × H × W` (any shape with a leading batch
//! axis works). The scale-invariant term fits one least-squares scale per image,
//! over all of that image's channels and pixels jointly.

use crate::error::{Error, Result};
use crate::nn::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub gamma_smse: f64,
    pub gamma_mse: f64,
    pub gamma_r: f64,
    pub gamma_s: f64,
    pub gamma_ce: f64,
    pub gamma_il: f64,
    /// Normalises the intrinsic loss against cross entropy in the joint loss.
    pub intrinsic_scale: f64,
    /// Extra multiplier on the intrinsic part of the joint loss.
    pub w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma_smse: 0.95,
            gamma_mse: 0.05,
            gamma_r: 1.0,
            gamma_s: 1.0,
            gamma_ce: 1.0,
            gamma_il: 1.0,
            intrinsic_scale: 100.0,
            w: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("gamma_smse", self.gamma_smse),
            ("gamma_mse", self.gamma_mse),
            ("gamma_r", self.gamma_r),
            ("gamma_s", self.gamma_s),
            ("gamma_ce", self.gamma_ce),
            ("gamma_il", self.gamma_il),
            ("intrinsic_scale", self.intrinsic_scale),
            ("w", self.w),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.gamma_smse + self.gamma_mse <= 0.0 {
            return Err(Error::Config("gamma_smse + gamma_mse must be positive".into()));
        }
        Ok(())
    }

    /// Weight applied to the intrinsic loss inside the joint loss.
    pub fn effective_intrinsic_weight(&self) -> f64 {
        self.gamma_il * self.intrinsic_scale * self.w
    }
}

/// Whether gradients flow through the fitted scale of the scale-invariant MSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlphaMode {
    #[default]
    Detached,
    Differentiable,
}

impl AlphaMode {
    pub fn name(self) -> &'static str {
        match self {
            AlphaMode::Detached => "detached",
            AlphaMode::Differentiable => "differentiable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "detached" => Ok(AlphaMode::Detached),
            "differentiable" => Ok(AlphaMode::Differentiable),
            other => Err(Error::Config(format!(
                "unknown alpha mode {other:?} (expected detached or differentiable)"
            ))),
        }
    }
}

/// Per-class cross-entropy weights; zero marks a class excluded from the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeightVector(Vec<f64>);

impl ClassWeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid("class weights must be finite and non-negative".into()));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::Degenerate("all class weights are zero".into()));
        }
        Ok(Self(weights))
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0; num_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Median-frequency balancing: `w_c = median(f) / f_c` over present classes.
pub fn median_frequency_weights(frequencies: &[f64]) -> Result<ClassWeightVector> {
    let mut present: Vec<f64> = frequencies.iter().copied().filter(|&f| f > 0.0).collect();
    if present.is_empty() {
        return Err(Error::Degenerate("all class frequencies are zero".into()));
    }
    present.sort_by(f64::total_cmp);
    let m = present.len();
    let median = if m % 2 == 1 {
        present[m / 2]
    } else {
        0.5 * (present[m / 2 - 1] + present[m / 2])
    };
    ClassWeightVector::new(
        frequencies
            .iter()
            .map(|&f| if f > 0.0 { median / f } else { 0.0 })
            .collect(),
    )
}

pub fn mse(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    let d = g.sub(pred, truth)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Per-image least-squares scale `Σ J·Ĵ / Σ J²`, shape `(N)`.
pub fn optimal_alpha(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    let cross = g.mul(pred, truth)?;
    let num = g.sum_per_sample(cross)?;
    let sq = g.square(pred);
    let den = g.sum_per_sample(sq)?;
    if g.value(den).data().contains(&0.0) {
        return Err(Error::Degenerate(
            "prediction is identically zero; the optimal scale is undefined".into(),
        ));
    }
    g.div(num, den)
}

pub fn smse(g: &mut Graph, pred: Var, truth: Var, mode: AlphaMode) -> Result<Var> {
    let mut alpha = optimal_alpha(g, pred, truth)?;
    if mode == AlphaMode::Detached {
        alpha = g.detach(alpha);
    }
    let scaled = g.scale_per_sample(pred, alpha)?;
    mse(g, scaled, truth)
}

/// `γ_smse · SMSE + γ_mse · MSE`.
pub fn combined_loss(g: &mut Graph, pred: Var, truth: Var, w: &LossWeights, mode: AlphaMode) -> Result<Var> {
    let plain = mse(g, pred, truth)?;
    let plain = g.scale(plain, w.gamma_mse);
    if w.gamma_smse == 0.0 {
        return Ok(plain);
    }
    let inv = smse(g, pred, truth, mode)?;
    let inv = g.scale(inv, w.gamma_smse);
    g.add(inv, plain)
}

/// `γ_R · CL(R, R̂) + γ_S · CL(S, Ŝ)`.
#[allow(clippy::too_many_arguments)]
pub fn intrinsic_loss(
    g: &mut Graph,
    refl: Var,
    refl_truth: Var,
    shading: Var,
    shading_truth: Var,
    w: &LossWeights,
    mode: AlphaMode,
) -> Result<Var> {
    let r = combined_loss(g, refl, refl_truth, w, mode)?;
    let r = g.scale(r, w.gamma_r);
    let s = combined_loss(g, shading, shading_truth, w, mode)?;
    let s = g.scale(s, w.gamma_s);
    g.add(r, s)
}

/// Softmax cross entropy, weight-normalised over pixels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[u8], weights: &ClassWeightVector) -> Result<Var> {
    g.cross_entropy(logits, labels, weights.as_slice())
}

/// Total joint loss and its two summands.
#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: Var,
    /// `γ_CE · L_CE`.
    pub ce_term: f64,
    /// `γ_IL · scale · w · L_IL`.
    pub intrinsic_term: f64,
    pub cross_entropy: f64,
    pub intrinsic: f64,
}

pub struct JointTargets<'a> {
    pub labels: &'a [u8],
    pub class_weights: &'a ClassWeightVector,
    pub reflectance: Var,
    pub shading: Var,
}

/// `γ_CE · L_CE + (γ_IL · scale · w) · L_IL`. The returned total's value is
/// exactly `ce_term + intrinsic_term`.
pub fn joint_loss(
    g: &mut Graph,
    logits: Var,
    refl: Var,
    shading: Var,
    targets: &JointTargets<'_>,
    w: &LossWeights,
    mode: AlphaMode,
) -> Result<JointLoss> {
    let ce = cross_entropy(g, logits, targets.labels, targets.class_weights)?;
    let il = intrinsic_loss(g, refl, targets.reflectance, shading, targets.shading, w, mode)?;
    let ce_scaled = g.scale(ce, w.gamma_ce);
    let il_scaled = g.scale(il, w.effective_intrinsic_weight());
    let total = g.add(ce_scaled, il_scaled)?;
    Ok(JointLoss {
        total,
        ce_term: g.value(ce_scaled).item(),
        intrinsic_term: g.value(il_scaled).item(),
        cross_entropy: g.value(ce).item(),
        intrinsic: g.value(il).item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn vec2(g: &mut Graph, a: f64, b: f64) -> Var {
        g.constant(Tensor::new(vec![1, 2], vec![a, b]).unwrap())
    }

    fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g)?;
        Ok(g.value(v).item())
    }

    #[test]
    fn mse_examples() {
        assert_eq!(eval(|g| { let a = vec2(g, 0.3, 0.7); mse(g, a, a) }).unwrap(), 0.0);
        let v = eval(|g| { let a = vec2(g, 1.5, 2.0); let b = vec2(g, 0.5, 1.0); mse(g, a, b) }).unwrap();
        assert_eq!(v, 1.0);
        let v = eval(|g| { let a = vec2(g, 0.0, 1.0); let b = vec2(g, 1.0, 1.0); mse(g, a, b) }).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn alpha_examples() {
        let a = |j: (f64, f64), t: (f64, f64)| {
            eval(|g| {
                let x = vec2(g, j.0, j.1);
                let y = vec2(g, t.0, t.1);
                optimal_alpha(g, x, y)
            })
        };
        assert_eq!(a((2.0, 4.0), (1.0, 2.0)).unwrap(), 0.5);
        assert_eq!(a((1.0, 2.0), (1.0, 2.0)).unwrap(), 1.0);
        assert!((a((1.0, 2.0), (2.0, 2.0)).unwrap() - 1.2).abs() < 1e-15);
        assert!(matches!(a((0.0, 0.0), (1.0, 2.0)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn alpha_matches_brute_force_line_search() {
        let (j, t) = ([1.0, 2.0], [2.0, 2.0]);
        let f = |a: f64| ((a * j[0] - t[0]).powi(2) + (a * j[1] - t[1]).powi(2)) / 2.0;
        let best = (0..=40_000)
            .map(|i| i as f64 * 1e-4)
            .min_by(|&x, &y| f(x).total_cmp(&f(y)))
            .unwrap();
        assert!((best - 1.2).abs() < 1e-4);
    }

    #[test]
    fn smse_examples() {
        let s = |j: (f64, f64), t: (f64, f64)| {
            eval(|g| {
                let x = vec2(g, j.0, j.1);
                let y = vec2(g, t.0, t.1);
                smse(g, x, y, AlphaMode::Detached)
            })
            .unwrap()
        };
        assert!(s((3.0, 6.0), (1.0, 2.0)).abs() < 1e-15);
        assert_eq!(s((1.0, 2.0), (1.0, 2.0)), 0.0);
        assert!((s((1.0, 2.0), (2.0, 2.0)) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn combined_examples() {
        let w = LossWeights::default();
        let v = eval(|g| {
            let x = vec2(g, 1.0, 2.0);
            let y = vec2(g, 2.0, 2.0);
            combined_loss(g, x, y, &w, AlphaMode::Detached)
        })
        .unwrap();
        assert!((v - 0.405).abs() < 1e-15);
        let only_mse = LossWeights { gamma_smse: 0.0, gamma_mse: 1.0, ..w };
        let v = eval(|g| {
            let x = vec2(g, 1.0, 2.0);
            let y = vec2(g, 2.0, 2.0);
            combined_loss(g, x, y, &only_mse, AlphaMode::Detached)
        })
        .unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn intrinsic_examples() {
        let w = LossWeights::default();
        let run = |w: LossWeights| {
            eval(|g| {
                let r = vec2(g, 1.0, 2.0);
                let rt = vec2(g, 2.0, 2.0);
                let s = vec2(g, 1.0, 2.0);
                let st = vec2(g, 2.0, 2.0);
                intrinsic_loss(g, r, rt, s, st, &w, AlphaMode::Detached)
            })
            .unwrap()
        };
        assert!((run(w) - 0.81).abs() < 1e-14);
        assert!((run(LossWeights { gamma_s: 0.0, ..w }) - 0.405).abs() < 1e-15);
        let zero = eval(|g| {
            let r = vec2(g, 1.0, 2.0);
            let s = vec2(g, 0.5, 0.5);
            intrinsic_loss(g, r, r, s, s, &w, AlphaMode::Detached)
        })
        .unwrap();
        assert_eq!(zero, 0.0);
    }

    fn logits(g: &mut Graph, c: usize, vals: &[f64]) -> Var {
        g.constant(Tensor::new(vec![1, c, 1, vals.len() / c], vals.to_vec()).unwrap())
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = eval(|g| {
            let x = logits(g, 16, &[0.0; 16]);
            cross_entropy(g, x, &[3], &ClassWeightVector::uniform(16))
        })
        .unwrap();
        assert!((uniform - 16f64.ln()).abs() < 1e-12);
        assert!((uniform - 2.77259).abs() < 1e-5);

        let weighted = eval(|g| {
            let x = logits(g, 2, &[0.0, 0.0]);
            cross_entropy(g, x, &[0], &ClassWeightVector::new(vec![2.0, 1.0]).unwrap())
        })
        .unwrap();
        assert!((weighted - 2f64.ln()).abs() < 1e-12);

        let confident = eval(|g| {
            let x = logits(g, 3, &[60.0, -60.0, -60.0]);
            cross_entropy(g, x, &[0], &ClassWeightVector::uniform(3))
        })
        .unwrap();
        assert!(confident.abs() < 1e-12);
        assert!(confident >= 0.0);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut g = Graph::new();
        let x = logits(&mut g, 2, &[0.0, 0.0]);
        assert!(matches!(
            cross_entropy(&mut g, x, &[2], &ClassWeightVector::uniform(2)),
            Err(Error::LabelRange { label: 2, num_classes: 2 })
        ));
    }

    #[test]
    fn joint_loss_breakdown() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let x = logits(&mut g, 2, &[0.0, 0.0]);
        let r = vec2(&mut g, 1.0, 2.0);
        let rt = vec2(&mut g, 2.0, 2.0);
        let s = vec2(&mut g, 1.0, 2.0);
        let st = vec2(&mut g, 2.0, 2.0);
        let cw = ClassWeightVector::uniform(2);
        let t = JointTargets { labels: &[1], class_weights: &cw, reflectance: rt, shading: st };
        let jl = joint_loss(&mut g, x, r, s, &t, &w, AlphaMode::Detached).unwrap();
        let total = g.value(jl.total).item();
        assert_eq!(total, jl.ce_term + jl.intrinsic_term);
        assert!((total - (2f64.ln() + 200.0 * 0.81)).abs() < 1e-10);
        assert!((total - 162.6931).abs() < 1e-4);

        let w0 = LossWeights { w: 0.0, ..w };
        let jl0 = joint_loss(&mut g, x, r, s, &t, &w0, AlphaMode::Detached).unwrap();
        assert_eq!(g.value(jl0.total).item(), jl0.ce_term);
        assert_eq!(jl0.ce_term, jl0.cross_entropy);
    }

    #[test]
    fn perfect_predictions_have_zero_joint_loss() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let x = logits(&mut g, 2, &[80.0, -80.0]);
        let r = vec2(&mut g, 0.2, 0.4);
        let s = vec2(&mut g, 0.9, 0.1);
        let cw = ClassWeightVector::uniform(2);
        let t = JointTargets { labels: &[0], class_weights: &cw, reflectance: r, shading: s };
        let jl = joint_loss(&mut g, x, r, s, &t, &w, AlphaMode::Detached).unwrap();
        assert!(g.value(jl.total).item().abs() < 1e-12);
    }

    #[test]
    fn median_frequency_examples() {
        assert_eq!(median_frequency_weights(&[0.25; 4]).unwrap().as_slice(), &[1.0; 4]);
        assert_eq!(median_frequency_weights(&[1.0, 1.0, 2.0]).unwrap().as_slice(), &[1.0, 1.0, 0.5]);
        assert_eq!(median_frequency_weights(&[4.0]).unwrap().as_slice(), &[1.0]);
        assert_eq!(median_frequency_weights(&[0.0, 2.0, 2.0]).unwrap().as_slice(), &[0.0, 1.0, 1.0]);
        assert!(median_frequency_weights(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { w: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { gamma_smse: 0.0, gamma_mse: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!(LossWeights::default().effective_intrinsic_weight(), 200.0);
    }
}
