//! First-order ℓ∞ attacks: FGSM and PGD with cross-entropy loss.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

/// Perturbation budget and iteration schedule of an ℓ∞ attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    pub clamp_range: (f64, f64),
}

impl AttackSpec {
    /// ε = 8/255, α = 2/255, 10 steps on `[0, 1]` inputs.
    pub fn standard_linf() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 10,
            random_start: false,
            clamp_range: (0.0, 1.0),
        }
    }

    /// PGD schedule with `α = ε/4` over `steps` iterations.
    pub fn pgd(epsilon: f64, steps: usize, random_start: bool) -> Self {
        Self {
            epsilon,
            step_size: if epsilon > 0.0 { epsilon / 4.0 } else { 1e-3 },
            steps,
            random_start,
            clamp_range: (0.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.steps > 0 && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!(
                "step size must be > 0, got {}",
                self.step_size
            )));
        }
        let (lo, hi) = self.clamp_range;
        if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
            return Err(Error::invalid(format!("clamp range [{lo}, {hi}] is empty")));
        }
        Ok(())
    }
}

/// `sign(0) = 0`, so zero-gradient coordinates stay put.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clamp(x + ε·sign(∇ₓ L_CE(x, y)))`.
pub fn fgsm(net: &Network, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<Tensor> {
    spec.validate()?;
    let g = net.input_gradient(x, y)?;
    let (lo, hi) = spec.clamp_range;
    x.zip_map(&g, |xi, gi| (xi + spec.epsilon * sign(gi)).clamp(lo, hi))
}

/// Projected gradient ascent on the cross-entropy inside `B∞(x, ε)`.
///
/// Each of the `steps` iterations takes `x ← Π_{B∞(x₀,ε)} clamp(x + α·sign(∇ₓL))`.
/// With `random_start` the first iterate is drawn uniformly from the ε-box
/// around `x₀` using `rng`; otherwise `rng` is not touched.
pub fn pgd(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    spec.validate()?;
    let (lo, hi) = spec.clamp_range;
    let eps = spec.epsilon;
    let mut adv = x.clone();
    if spec.random_start && eps > 0.0 {
        for (a, &x0) in adv.data_mut().iter_mut().zip(x.data()) {
            let d: f64 = rng.random_range(-eps..=eps);
            *a = project(x0 + d, x0, eps).clamp(lo, hi);
        }
    }
    for _ in 0..spec.steps {
        let g = net.input_gradient(&adv, y)?;
        for ((a, &gi), &x0) in adv.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
            let stepped = (*a + spec.step_size * sign(gi)).clamp(lo, hi);
            *a = project(stepped, x0, eps);
        }
    }
    Ok(adv)
}

fn project(v: f64, center: f64, eps: f64) -> f64 {
    v.max(center - eps).min(center + eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

/// A named attack used for robust-accuracy evaluation. Deserializes from the
/// object form or from the textual id accepted by [`FromStr`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AttackRepr")]
pub struct Attack {
    pub name: String,
    pub kind: AttackKind,
    pub spec: AttackSpec,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AttackRepr {
    Text(String),
    Full(AttackFields),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttackFields {
    name: String,
    kind: AttackKind,
    spec: AttackSpec,
}

impl TryFrom<AttackRepr> for Attack {
    type Error = Error;

    fn try_from(r: AttackRepr) -> Result<Self> {
        match r {
            AttackRepr::Text(s) => s.parse(),
            AttackRepr::Full(AttackFields { name, kind, spec }) => {
                spec.validate()?;
                Ok(Attack { name, kind, spec })
            }
        }
    }
}

impl Attack {
    pub fn run(
        &self,
        net: &Network,
        x: &Tensor,
        y: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        match self.kind {
            AttackKind::Fgsm => fgsm(net, x, y, &self.spec),
            AttackKind::Pgd => pgd(net, x, y, &self.spec, rng),
        }
    }
}

fn parse_number(s: &str) -> Result<f64> {
    let bad = || Error::Config(format!("bad number '{s}'"));
    match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            Ok(n / d)
        }
        None => s.trim().parse().map_err(|_| bad()),
    }
}

/// Parses `kind[:key=value]...`, e.g. `pgd:eps=8/255:alpha=2/255:steps=10`.
///
/// Keys: `eps`, `alpha`, `steps`, `rs` (random start, 0/1), `name`.
/// Defaults: ε = 8/255, α = ε/4, 10 steps, no random start.
impl FromStr for Attack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind = match parts.next().unwrap_or("") {
            "fgsm" => AttackKind::Fgsm,
            "pgd" => AttackKind::Pgd,
            other => return Err(Error::Config(format!("unknown attack '{other}'"))),
        };
        let mut eps = 8.0 / 255.0;
        let mut alpha = None;
        let mut steps = 10;
        let mut rs = false;
        let mut name = None;
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("attack option '{kv}' is not key=value")))?;
            match k {
                "eps" => eps = parse_number(v)?,
                "alpha" => alpha = Some(parse_number(v)?),
                "steps" => {
                    steps = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad step count '{v}'")))?
                }
                "rs" => rs = matches!(v, "1" | "true"),
                "name" => name = Some(v.to_string()),
                _ => return Err(Error::Config(format!("unknown attack option '{k}'"))),
            }
        }
        let spec = AttackSpec {
            epsilon: eps,
            step_size: alpha.unwrap_or(if eps > 0.0 { eps / 4.0 } else { 1e-3 }),
            steps: if kind == AttackKind::Fgsm { 1 } else { steps },
            random_start: rs,
            clamp_range: (0.0, 1.0),
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        let name = name.unwrap_or_else(|| match kind {
            AttackKind::Fgsm => "fgsm".into(),
            AttackKind::Pgd => "pgd".into(),
        });
        Ok(Attack { name, kind, spec })
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
        };
        write!(
            f,
            "{kind}:eps={}:alpha={}:steps={}:rs={}:name={}",
            self.spec.epsilon,
            self.spec.step_size,
            self.spec.steps,
            u8::from(self.spec.random_start),
            self.name
        )
    }
}
