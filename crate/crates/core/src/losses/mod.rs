//! Task losses with analytic gradients, and their weighted sum.
//!
//! Every loss works in `f64` and returns `(value, gradient)` with the
//! gradient taken w.r.t. the prediction it was given.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Smoothing term of the soft Dice coefficient.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub anatomy: f64,
    pub morphology: f64,
    pub radiomics: f64,
    pub rotation: f64,
    pub location: f64,
    pub mim: f64,
    pub contrast: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            anatomy: 0.2,
            morphology: 1.0,
            radiomics: 1.0,
            rotation: 1.0,
            location: 1.0,
            mim: 1.0,
            contrast: 1.0,
            temperature: 0.5,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 7] {
        [self.anatomy, self.morphology, self.radiomics, self.rotation, self.location, self.mim, self.contrast]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }
}

/// The `losses` configuration section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
    pub lambda7: f64,
    pub tau: f64,
    pub tasks: TaskSet,
    /// Reduction of the morphology and radiomics L1 terms.
    pub l1_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::from_weights(&LossWeights::default(), TaskSet::all())
    }
}

impl LossConfig {
    pub fn from_weights(w: &LossWeights, tasks: TaskSet) -> Self {
        let [lambda1, lambda2, lambda3, lambda4, lambda5, lambda6, lambda7] = w.as_array();
        Self {
            lambda1,
            lambda2,
            lambda3,
            lambda4,
            lambda5,
            lambda6,
            lambda7,
            tau: w.temperature,
            tasks,
            l1_reduction: Reduction::Mean,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            anatomy: self.lambda1,
            morphology: self.lambda2,
            radiomics: self.lambda3,
            rotation: self.lambda4,
            location: self.lambda5,
            mim: self.lambda6,
            contrast: self.lambda7,
            temperature: self.tau,
        }
    }
}

/// Which of the seven tasks train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSet {
    pub anatomy: bool,
    pub morphology: bool,
    pub radiomics: bool,
    pub rotation: bool,
    pub location: bool,
    pub mim: bool,
    pub contrast: bool,
}

impl Default for TaskSet {
    fn default() -> Self {
        Self::all()
    }
}

pub const TASK_NAMES: [&str; 7] = ["anatomy", "morpho", "radiomics", "rot", "loc", "mim", "contrast"];

impl TaskSet {
    pub fn all() -> Self {
        Self::from_array([true; 7])
    }

    /// Task groups: domain (anatomy, morphology, radiomics), self
    /// (rotation, location, reconstruction) and contrastive.
    pub fn from_groups(domain: bool, self_supervised: bool, contrast: bool) -> Self {
        Self {
            anatomy: domain,
            morphology: domain,
            radiomics: domain,
            rotation: self_supervised,
            location: self_supervised,
            mim: self_supervised,
            contrast,
        }
    }

    pub fn as_array(&self) -> [bool; 7] {
        [self.anatomy, self.morphology, self.radiomics, self.rotation, self.location, self.mim, self.contrast]
    }

    pub fn from_array(a: [bool; 7]) -> Self {
        Self {
            anatomy: a[0],
            morphology: a[1],
            radiomics: a[2],
            rotation: a[3],
            location: a[4],
            mim: a[5],
            contrast: a[6],
        }
    }

    pub fn any(&self) -> bool {
        self.as_array().iter().any(|&b| b)
    }
}

/// Raw per-task values; `None` when a task had nothing to score.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub values: [Option<f64>; 7],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub anatomy: f64,
    pub morpho: f64,
    pub radiomics: f64,
    pub rot: f64,
    pub loc: f64,
    pub mim: f64,
    pub contrast: f64,
    pub total: f64,
    pub active: TaskSet,
    /// Active tasks that had nothing to score this step.
    pub skipped: [bool; 7],
}

impl LossReport {
    pub fn components(&self) -> [f64; 7] {
        [self.anatomy, self.morpho, self.radiomics, self.rot, self.loc, self.mim, self.contrast]
    }

    /// First non-finite component, by task name.
    pub fn non_finite_task(&self) -> Option<&'static str> {
        self.components().iter().position(|v| !v.is_finite()).map(|i| TASK_NAMES[i]).or((!self.total.is_finite()).then_some("total"))
    }
}

/// Weighted sum over active tasks. Inactive or skipped tasks report 0.
pub fn total_loss(parts: &LossComponents, weights: &LossWeights, active: TaskSet) -> Result<LossReport> {
    weights.validate()?;
    let w = weights.as_array();
    let on = active.as_array();
    let mut vals = [0.0; 7];
    let mut skipped = [false; 7];
    let mut total = 0.0;
    for k in 0..7 {
        if !on[k] {
            continue;
        }
        match parts.values[k] {
            Some(v) => {
                vals[k] = v;
                total += w[k] * v;
            }
            None => skipped[k] = true,
        }
    }
    Ok(LossReport {
        anatomy: vals[0],
        morpho: vals[1],
        radiomics: vals[2],
        rot: vals[3],
        loc: vals[4],
        mim: vals[5],
        contrast: vals[6],
        total,
        active,
        skipped,
    })
}

fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - mx).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

/// `1 - mean soft Dice` over `present` regions. `logits` is channels-last
/// `voxels x classes` with class 0 as background; `labels` holds the class
/// per voxel.
pub fn dice_loss(logits: &[f64], num_classes: usize, labels: &[u16], present: &[u16]) -> Result<(f64, Vec<f64>)> {
    if present.is_empty() {
        return Err(Error::invalid("dice loss needs at least one present region"));
    }
    if logits.len() != labels.len() * num_classes {
        return Err(Error::invalid("logit and label shapes differ"));
    }
    if present.iter().any(|&r| r == 0 || r as usize >= num_classes) {
        return Err(Error::invalid("present regions must be foreground classes"));
    }
    let k = num_classes;
    let mut probs = vec![0.0; logits.len()];
    for (l, p) in logits.chunks_exact(k).zip(probs.chunks_exact_mut(k)) {
        softmax_row(l, p);
    }
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut gsum = vec![0.0; k];
    for (p, &g) in probs.chunks_exact(k).zip(labels) {
        for &r in present {
            psum[r as usize] += p[r as usize];
        }
        inter[g as usize] += p[g as usize];
        gsum[g as usize] += 1.0;
    }
    let m = present.len() as f64;
    let mut mean = 0.0;
    // dL/dp_r = -(1/m) (2 g (P+G+e) - (2I+e)) / (P+G+e)^2
    let mut coef_g = vec![0.0; k];
    let mut coef = vec![0.0; k];
    for &r in present {
        let r = r as usize;
        let den = psum[r] + gsum[r] + DICE_EPS;
        let num = 2.0 * inter[r] + DICE_EPS;
        mean += num / den;
        coef_g[r] = -2.0 / (m * den);
        coef[r] = num / (m * den * den);
    }
    let loss = 1.0 - mean / m;
    let mut grad = vec![0.0; logits.len()];
    let mut dp = vec![0.0; k];
    for ((p, gr), &g) in probs.chunks_exact(k).zip(grad.chunks_exact_mut(k)).zip(labels) {
        for c in 0..k {
            dp[c] = coef[c] + if c == g as usize { coef_g[c] } else { 0.0 };
        }
        let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        for c in 0..k {
            gr[c] = p[c] * (dp[c] - dot);
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// L1 over the `active` indices; `None` when there are none.
pub fn masked_l1(pred: &[f64], target: &[f64], active: &[usize], reduction: Reduction) -> Result<Option<(f64, Vec<f64>)>> {
    if pred.len() != target.len() {
        return Err(Error::invalid("prediction and target lengths differ"));
    }
    if active.is_empty() {
        return Ok(None);
    }
    if active.iter().any(|&i| i >= pred.len()) {
        return Err(Error::invalid("active index out of range"));
    }
    let scale = match reduction {
        Reduction::Mean => 1.0 / active.len() as f64,
        Reduction::Sum => 1.0,
    };
    let mut grad = vec![0.0; pred.len()];
    let mut sum = 0.0;
    for &i in active {
        let d = pred[i] - target[i];
        sum += d.abs();
        grad[i] = scale * sign(d);
    }
    Ok(Some((sum * scale, grad)))
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Negative log-softmax at `target`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::invalid(format!("class {target} out of range for {} logits", logits.len())));
    }
    let mut p = vec![0.0; logits.len()];
    softmax_row(logits, &mut p);
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    let loss = lse - logits[target];
    p[target] -= 1.0;
    Ok((loss, p))
}

/// L1 averaged over masked voxels only.
pub fn mim_l1(recon: &[f64], original: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    if recon.len() != original.len() || recon.len() != mask.len() {
        return Err(Error::invalid("reconstruction, original and mask shapes differ"));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::invalid("reconstruction loss needs a non-empty mask"));
    }
    let inv = 1.0 / n as f64;
    let mut grad = vec![0.0; recon.len()];
    let mut sum = 0.0;
    for i in 0..recon.len() {
        if mask[i] {
            let d = recon[i] - original[i];
            sum += d.abs();
            grad[i] = inv * sign(d);
        }
    }
    Ok((sum * inv, grad))
}

/// Normalized temperature-scaled cross entropy over `2N` embeddings where
/// `first[i]` and `second[i]` are positives and everything else is a
/// negative. Averaged over all `2N` anchors. Returns gradients for both
/// halves.
pub fn ntxent(first: &[Vec<f64>], second: &[Vec<f64>], temperature: f64) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n = first.len();
    if n < 2 || second.len() != n {
        return Err(Error::invalid("contrastive loss needs at least two pairs"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let z: Vec<&Vec<f64>> = first.iter().chain(second).collect();
    let d = z[0].len();
    for v in &z {
        if v.len() != d {
            return Err(Error::invalid("embedding sizes differ"));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!("embeddings must be unit vectors, got norm {norm}")));
        }
    }
    let m = 2 * n;
    let inv_t = 1.0 / temperature;
    let sim: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|k| z[i].iter().zip(z[k]).map(|(a, b)| a * b).sum::<f64>() * inv_t).collect()).collect();
    let mut grads = vec![vec![0.0; d]; m];
    let mut total = 0.0;
    for i in 0..m {
        let p = (i + n) % m;
        let mx = (0..m).filter(|&k| k != i).map(|k| sim[i][k]).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = (0..m).map(|k| if k == i { 0.0 } else { (sim[i][k] - mx).exp() }).collect();
        let s: f64 = w.iter().sum();
        total += mx + s.ln() - sim[i][p];
        // d/ds_ik = softmax_k - [k == p], and ds_ik = (z_i . z_k) / t.
        for k in 0..m {
            if k == i {
                continue;
            }
            let c = (w[k] / s - if k == p { 1.0 } else { 0.0 }) * inv_t;
            for t in 0..d {
                grads[i][t] += c * z[k][t];
                grads[k][t] += c * z[i][t];
            }
        }
    }
    let scale = 1.0 / m as f64;
    grads.iter_mut().flatten().for_each(|g| *g *= scale);
    let second_grads = grads.split_off(n);
    Ok((total * scale, grads, second_grads))
}
