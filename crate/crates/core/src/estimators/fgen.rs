//! Smooth f-divergence generators normalized so that `f(1) = f'(1) = 0`.
//!
//! | kind | f(t) | κ(t) = t f''(t) | sup κ |
//! |------|------|-----------------|-------|
//! | kl | t log t − (t − 1) | 1 | 1 |
//! | js | t log t − (t + 1) log((t + 1)/2) | 1/(t + 1) | 1 |
//! | triangular | (t − 1)²/(t + 1) | 8t/(t + 1)³ | 32/27 |
//! | hellinger | (√t − 1)² | 1/(2√t) | ∞ |
//! | pearson | (t − 1)² | 2t | ∞ |
//! | neyman | (1 − t)²/t | 2/t² | ∞ |
//! | alpha(a) | (t^a − a(t − 1) − 1)/(a(a − 1)) | t^(a−1) | ∞ |
//!
//! `D_f(P‖Q) = ∫ q f(p/q)`. The adjoint `f◇(t) = t f(1/t)` satisfies
//! `D_f(P‖Q) = D_{f◇}(Q‖P)`.

use crate::error::{Error, Result};
use crate::special::softplus;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FKind {
    Kl,
    Js,
    Triangular,
    Hellinger,
    Pearson,
    Neyman,
    Alpha(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FGenerator {
    pub kind: FKind,
    /// Evaluate the adjoint `t f(1/t)` instead of `f`.
    pub adjoint: bool,
}

impl FGenerator {
    pub fn new(kind: FKind) -> Result<Self> {
        if let FKind::Alpha(a) = kind {
            if !(-2.0..=3.0).contains(&a) || a == 0.0 || a == 1.0 || !a.is_finite() {
                return Err(Error::input(
                    "alpha",
                    format!("alpha parameter {a} outside [-2, 3] minus {{0, 1}}"),
                ));
            }
        }
        Ok(FGenerator { kind, adjoint: false })
    }

    pub fn kl() -> Self {
        FGenerator {
            kind: FKind::Kl,
            adjoint: false,
        }
    }

    /// Every generator kind, with a few alpha parameters.
    pub fn catalogue() -> Vec<FGenerator> {
        let mut v: Vec<FGenerator> = [
            FKind::Kl,
            FKind::Js,
            FKind::Triangular,
            FKind::Hellinger,
            FKind::Pearson,
            FKind::Neyman,
        ]
        .into_iter()
        .map(|k| FGenerator {
            kind: k,
            adjoint: false,
        })
        .collect();
        for a in [-1.5, 0.5, 2.0] {
            v.push(FGenerator {
                kind: FKind::Alpha(a),
                adjoint: false,
            });
        }
        v
    }

    pub fn parse(name: &str) -> Result<Self> {
        let n = name.trim().to_ascii_lowercase();
        let kind = match n.as_str() {
            "kl" => FKind::Kl,
            "js" => FKind::Js,
            "triangular" => FKind::Triangular,
            "hellinger" => FKind::Hellinger,
            "pearson" => FKind::Pearson,
            "neyman" => FKind::Neyman,
            _ => {
                let inner = n
                    .strip_prefix("alpha(")
                    .and_then(|s| s.strip_suffix(')'))
                    .ok_or_else(|| Error::input("generator", format!("unknown generator `{name}`")))?;
                let a: f64 = inner
                    .parse()
                    .map_err(|_| Error::input("generator", format!("bad alpha parameter in `{name}`")))?;
                FKind::Alpha(a)
            }
        };
        Self::new(kind)
    }

    pub fn name(&self) -> String {
        let base = match self.kind {
            FKind::Kl => "kl".to_string(),
            FKind::Js => "js".to_string(),
            FKind::Triangular => "triangular".to_string(),
            FKind::Hellinger => "hellinger".to_string(),
            FKind::Pearson => "pearson".to_string(),
            FKind::Neyman => "neyman".to_string(),
            FKind::Alpha(a) => format!("alpha({a})"),
        };
        if self.adjoint {
            format!("adjoint[{base}]")
        } else {
            base
        }
    }

    pub fn adjoint(&self) -> Self {
        FGenerator {
            kind: self.kind,
            adjoint: !self.adjoint,
        }
    }

    fn base_f_log(&self, l: f64) -> f64 {
        let t = l.exp();
        match self.kind {
            FKind::Kl => {
                if l == f64::NEG_INFINITY {
                    1.0
                } else {
                    t * l - t + 1.0
                }
            }
            FKind::Js => {
                // t log t − (t+1)(log(t+1) − log 2)
                let lt1 = softplus(l);
                let a = if t == 0.0 { 0.0 } else { t * l };
                a - (t + 1.0) * (lt1 - std::f64::consts::LN_2)
            }
            FKind::Triangular => (t - 1.0) * (t - 1.0) / (t + 1.0),
            FKind::Hellinger => {
                let s = (0.5 * l).exp() - 1.0;
                s * s
            }
            FKind::Pearson => (t - 1.0) * (t - 1.0),
            FKind::Neyman => t - 2.0 + (-l).exp(),
            FKind::Alpha(a) => ((a * l).exp() - a * (t - 1.0) - 1.0) / (a * (a - 1.0)),
        }
    }

    /// `f(e^l)`: generators are evaluated from log ratios.
    pub fn f_log(&self, l: f64) -> f64 {
        if self.adjoint {
            // t f(1/t)
            l.exp() * self.base_f_log(-l)
        } else {
            self.base_f_log(l)
        }
    }

    pub fn f(&self, t: f64) -> f64 {
        self.f_log(t.ln())
    }

    fn base_f1(&self, t: f64) -> f64 {
        match self.kind {
            FKind::Kl => t.ln(),
            FKind::Js => (2.0 * t / (t + 1.0)).ln(),
            FKind::Triangular => (t - 1.0) * (t + 3.0) / ((t + 1.0) * (t + 1.0)),
            FKind::Hellinger => 1.0 - 1.0 / t.sqrt(),
            FKind::Pearson => 2.0 * (t - 1.0),
            FKind::Neyman => 1.0 - 1.0 / (t * t),
            FKind::Alpha(a) => (t.powf(a - 1.0) - 1.0) / (a - 1.0),
        }
    }

    fn base_f2(&self, t: f64) -> f64 {
        match self.kind {
            FKind::Kl => 1.0 / t,
            FKind::Js => 1.0 / (t * (t + 1.0)),
            FKind::Triangular => 8.0 / (t + 1.0).powi(3),
            FKind::Hellinger => 0.5 * t.powf(-1.5),
            FKind::Pearson => 2.0,
            FKind::Neyman => 2.0 / (t * t * t),
            FKind::Alpha(a) => t.powf(a - 2.0),
        }
    }

    pub fn f1(&self, t: f64) -> f64 {
        if self.adjoint {
            let s = 1.0 / t;
            self.base_f_log(s.ln()) - self.base_f1(s) * s
        } else {
            self.base_f1(t)
        }
    }

    pub fn f2(&self, t: f64) -> f64 {
        if self.adjoint {
            self.base_f2(1.0 / t) / (t * t * t)
        } else {
            self.base_f2(t)
        }
    }

    /// `t f''(t)`, written in closed form.
    pub fn kappa(&self, t: f64) -> f64 {
        if self.adjoint {
            return t * self.f2(t);
        }
        match self.kind {
            FKind::Kl => 1.0,
            FKind::Js => 1.0 / (t + 1.0),
            FKind::Triangular => 8.0 * t / (t + 1.0).powi(3),
            FKind::Hellinger => 0.5 / t.sqrt(),
            FKind::Pearson => 2.0 * t,
            FKind::Neyman => 2.0 / (t * t),
            FKind::Alpha(a) => t.powf(a - 1.0),
        }
    }

    /// `sup_{t>0} κ(t)`, or `+∞`.
    pub fn kappa_sup(&self) -> f64 {
        match self.kind {
            // js and triangular are self-adjoint.
            FKind::Js => 1.0,
            FKind::Kl if !self.adjoint => 1.0,
            FKind::Triangular => 32.0 / 27.0,
            _ => f64::INFINITY,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Vec<f64> {
        (0..=240).map(|i| 10f64.powf(-6.0 + 12.0 * i as f64 / 240.0)).collect()
    }

    #[test]
    fn normalization_and_convexity() {
        for g in FGenerator::catalogue() {
            for gg in [g, g.adjoint()] {
                assert!(gg.f(1.0).abs() < 1e-12, "{}", gg.name());
                assert!(gg.f1(1.0).abs() < 1e-12, "{}", gg.name());
                for t in grid() {
                    assert!(gg.f2(t) >= 0.0);
                    let k = gg.kappa(t);
                    assert!(
                        (k - t * gg.f2(t)).abs() <= 1e-12 * k.abs().max(1.0),
                        "{} t={t}",
                        gg.name()
                    );
                }
            }
        }
    }

    #[test]
    fn derivatives_match_differences() {
        for g in FGenerator::catalogue() {
            for gg in [g, g.adjoint()] {
                for t in [0.3, 1.7, 4.0] {
                    let h = 1e-5;
                    let d1 = (gg.f(t + h) - gg.f(t - h)) / (2.0 * h);
                    assert!((d1 - gg.f1(t)).abs() < 1e-6 * (1.0 + d1.abs()), "{} t={t}", gg.name());
                    let d2 = (gg.f1(t + h) - gg.f1(t - h)) / (2.0 * h);
                    assert!((d2 - gg.f2(t)).abs() < 1e-5 * (1.0 + d2.abs()), "{} t={t}", gg.name());
                }
            }
        }
    }

    #[test]
    fn curvature_suprema() {
        let js = FGenerator::new(FKind::Js).unwrap();
        let tri = FGenerator::new(FKind::Triangular).unwrap();
        let kl = FGenerator::kl();
        let mut mj: f64 = 0.0;
        let mut mt: f64 = 0.0;
        for t in grid() {
            mj = mj.max(js.kappa(t));
            mt = mt.max(tri.kappa(t));
            assert_eq!(kl.kappa(t), 1.0);
        }
        assert!(mj <= 1.0 + 1e-9);
        assert!(mt <= 32.0 / 27.0 + 1e-9);
        assert!((tri.kappa(0.5) - 32.0 / 27.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_range_is_enforced() {
        assert!(FGenerator::new(FKind::Alpha(1.0)).is_err());
        assert!(FGenerator::new(FKind::Alpha(3.5)).is_err());
        assert!(FGenerator::parse("alpha(0.5)").is_ok());
        assert!(FGenerator::parse("tv").is_err());
    }
}
