//! Layered configuration: preset defaults, then an optional JSON file, then
//! command-line overrides, finally materialized into a complete `RunConfig`.

use fedgen_core::config::{RunConfig, ScalarOrMatrix};
use fedgen_core::{Error, Result};
use serde::Deserialize;

use crate::CommonOpts;

/// Every schema key, optional, so presets, files and flags can each fill a
/// subset.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverlay {
    pub m: Option<usize>,
    pub p: Option<usize>,
    pub s: Option<usize>,
    #[serde(rename = "T")]
    pub rounds: Option<usize>,
    pub regime: Option<String>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub n: Option<ScalarOrMatrix<usize>>,
    pub alpha: Option<ScalarOrMatrix<f64>>,
    pub sigma: Option<ScalarOrMatrix<f64>>,
    pub het_kind: Option<String>,
    pub het_norm: Option<f64>,
    pub delta0_norm: Option<f64>,
    pub w_star_norm: Option<f64>,
    pub base_seed: Option<u64>,
    pub trials: Option<usize>,
}

impl ConfigOverlay {
    fn merge_over(self, base: ConfigOverlay) -> ConfigOverlay {
        ConfigOverlay {
            m: self.m.or(base.m),
            p: self.p.or(base.p),
            s: self.s.or(base.s),
            rounds: self.rounds.or(base.rounds),
            regime: self.regime.or(base.regime),
            k: self.k.or(base.k),
            n: self.n.or(base.n),
            alpha: self.alpha.or(base.alpha),
            sigma: self.sigma.or(base.sigma),
            het_kind: self.het_kind.or(base.het_kind),
            het_norm: self.het_norm.or(base.het_norm),
            delta0_norm: self.delta0_norm.or(base.delta0_norm),
            w_star_norm: self.w_star_norm.or(base.w_star_norm),
            base_seed: self.base_seed.or(base.base_seed),
            trials: self.trials.or(base.trials),
        }
    }
}

/// Captioned experiment shapes. The step size is deliberately absent: it is
/// a required flag wherever the regime consumes it.
pub fn preset(name: &str) -> Result<ConfigOverlay> {
    let mut o = ConfigOverlay {
        m: Some(3),
        p: Some(200),
        s: Some(5),
        sigma: Some(ScalarOrMatrix::Scalar(0.7)),
        het_kind: Some("stationary_symmetric".to_string()),
        het_norm: Some(0.5),
        delta0_norm: Some(1.0),
        trials: Some(20),
        ..ConfigOverlay::default()
    };
    match name {
        "fig2" => {
            o.rounds = Some(10);
            o.regime = Some("k1".to_string());
            o.n = Some(ScalarOrMatrix::Scalar(50));
        }
        "fig3" => {
            o.rounds = Some(5);
            o.regime = Some("kfinite".to_string());
            o.k = Some(1);
            o.n = Some(ScalarOrMatrix::Scalar(144));
        }
        "fig4" => {
            o.rounds = Some(40);
            o.regime = Some("kinf".to_string());
            o.n = Some(ScalarOrMatrix::Scalar(25));
        }
        other => {
            return Err(Error::InvalidConfig(format!("unknown preset {other:?}")));
        }
    }
    Ok(o)
}

/// Builds the final configuration from preset < file < flags.
pub fn build_config(opts: &CommonOpts) -> Result<RunConfig> {
    let mut overlay = ConfigOverlay::default();
    if let Some(name) = &opts.preset {
        overlay = preset(name)?;
    }
    if let Some(path) = &opts.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let file: ConfigOverlay = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("cannot parse {}: {e}", path.display())))?;
        overlay = file.merge_over(overlay);
    }
    let flags = ConfigOverlay {
        m: opts.m,
        p: opts.p,
        s: opts.s,
        rounds: opts.t,
        regime: opts.regime.clone(),
        k: opts.k,
        n: opts.n.map(ScalarOrMatrix::Scalar),
        alpha: opts.alpha.map(ScalarOrMatrix::Scalar),
        sigma: opts.sigma.map(ScalarOrMatrix::Scalar),
        het_kind: opts.het_kind.clone(),
        het_norm: opts.het_norm,
        delta0_norm: opts.delta0,
        w_star_norm: None,
        base_seed: opts.seed,
        trials: opts.trials,
    };
    let merged = flags.merge_over(overlay);

    let regime = merged
        .regime
        .clone()
        .ok_or_else(|| Error::InvalidConfig("regime is required (k1|kfinite|kinf)".into()))?;
    let needs_alpha = regime == "k1" || regime == "kfinite";
    let alpha = match merged.alpha {
        Some(a) => a,
        None if needs_alpha => {
            return Err(Error::InvalidConfig(
                "alpha is required for step-based regimes; pass --alpha".into(),
            ))
        }
        // Converged local updates never consume a step size; the plan still
        // stores a positive placeholder.
        None => ScalarOrMatrix::Scalar(0.05),
    };

    let missing = |field: &str| Error::InvalidConfig(format!("{field} is required"));
    Ok(RunConfig {
        m: merged.m.ok_or_else(|| missing("m"))?,
        p: merged.p.ok_or_else(|| missing("p"))?,
        s: merged.s.unwrap_or(1),
        rounds: merged.rounds.ok_or_else(|| missing("T"))?,
        regime,
        k: merged.k,
        n: merged.n.ok_or_else(|| missing("n"))?,
        alpha,
        sigma: merged.sigma.ok_or_else(|| missing("sigma"))?,
        het_kind: merged.het_kind.unwrap_or_else(|| "stationary_symmetric".to_string()),
        het_norm: merged.het_norm.unwrap_or(0.0),
        delta0_norm: merged.delta0_norm.unwrap_or(0.0),
        w_star_norm: merged.w_star_norm.unwrap_or(1.0),
        base_seed: merged.base_seed.unwrap_or(0),
        trials: merged.trials.unwrap_or(20),
    })
}
