//! Variant comparison: the full model against each component switched off.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::Song;

use super::config::TrainConfig;
use super::eval::{evaluate_checkpoint, EvalOptions, EvalReport};
use super::train::{train_stage1, train_stage2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoUvDiffusion,
    NoF0Diffusion,
    NoPostnet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoUvDiffusion,
        Variant::NoF0Diffusion,
        Variant::NoPostnet,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoUvDiffusion => "w/o UV diffusion",
            Variant::NoF0Diffusion => "w/o F0 diffusion",
            Variant::NoPostnet => "w/o post-net",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Stage-1 recipe shared by every variant. Its toggles must all be on.
    pub train: TrainConfig,
    pub stage2_steps: usize,
    pub seeds: Vec<u64>,
    pub eval: EvalOptions,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            stage2_steps: 2000,
            seeds: vec![0, 1, 2],
            eval: EvalOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub report: EvalReport,
}

/// Per-variant means over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMean {
    pub variant: Variant,
    pub f0rmse: Option<f64>,
    pub vde: f64,
    pub mcd_lite: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub means: Vec<AblationMean>,
}

/// Whether a variant moved its metric the expected way against the full
/// model. `as_expected` is absent when either side lacks the metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub variant: Variant,
    pub metric: String,
    pub full: Option<f64>,
    pub ablated: Option<f64>,
    pub as_expected: Option<bool>,
}

impl AblationTable {
    pub fn mean(&self, v: Variant) -> Option<&AblationMean> {
        self.means.iter().find(|m| m.variant == v)
    }

    /// Expected: no UV diffusion raises VDE, no F0 diffusion raises F0RMSE,
    /// no post-net raises mcd_lite.
    pub fn directions(&self) -> Vec<Direction> {
        let checks: [(Variant, &str, fn(&AblationMean) -> Option<f64>); 3] = [
            (Variant::NoUvDiffusion, "vde", |m| Some(m.vde)),
            (Variant::NoF0Diffusion, "f0rmse", |m| m.f0rmse),
            (Variant::NoPostnet, "mcd_lite", |m| Some(m.mcd_lite)),
        ];
        let full = self.mean(Variant::Full);
        checks
            .into_iter()
            .map(|(v, metric, get)| {
                let f = full.and_then(get);
                let a = self.mean(v).and_then(get);
                Direction {
                    variant: v,
                    metric: metric.to_string(),
                    full: f,
                    ablated: a,
                    as_expected: f.zip(a).map(|(f, a)| a >= f),
                }
            })
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| variant | F0RMSE | VDE | mcd_lite |\n|---|---|---|---|\n");
        for m in &self.means {
            let f0 = m.f0rmse.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "| {} | {f0} | {:.4} | {:.4} |", m.variant.label(), m.vde, m.mcd_lite);
        }
        s
    }
}

fn means(rows: &[AblationRow], order: &[Variant]) -> Vec<AblationMean> {
    order
        .iter()
        .filter_map(|&v| {
            let rs: Vec<&EvalReport> = rows.iter().filter(|r| r.variant == v).map(|r| &r.report).collect();
            if rs.is_empty() {
                return None;
            }
            let n = rs.len() as f64;
            let f0: Vec<f64> = rs.iter().filter_map(|r| r.f0rmse).collect();
            Some(AblationMean {
                variant: v,
                f0rmse: (f0.len() == rs.len()).then(|| f0.iter().sum::<f64>() / n),
                vde: rs.iter().map(|r| r.vde).sum::<f64>() / n,
                mcd_lite: rs.iter().map(|r| r.mcd_lite).sum::<f64>() / n,
            })
        })
        .collect()
}

/// Train and score every variant for every seed. The post-net ablation
/// reuses the full model's stage-1 checkpoint and reports its coarse output.
pub fn run_ablation(cfg: &AblationConfig, train: &[Song], test: &[Song]) -> Result<AblationTable> {
    let base = &cfg.train;
    base.validate()?;
    if !(base.uv_diffusion && base.f0_diffusion && base.postnet) {
        return Err(Error::Config(
            "conflicting toggles: the ablation base config must have every component on".into(),
        ));
    }
    if base.stage != 1 {
        return Err(Error::Config("the ablation base config must be a stage-1 config".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for variant in [Variant::Full, Variant::NoUvDiffusion, Variant::NoF0Diffusion] {
            let s1 = TrainConfig {
                seed,
                uv_diffusion: variant != Variant::NoUvDiffusion,
                f0_diffusion: variant != Variant::NoF0Diffusion,
                ..base.clone()
            };
            let (ck, _) = train_stage1(&s1, train, |_| {})?;
            let s2 = TrainConfig {
                stage: 2,
                steps: cfg.stage2_steps,
                init_checkpoint: Some("<in memory>".into()),
                ..s1
            };
            let (ck, _) = train_stage2(&s2, &ck, train, |_| {})?;
            let ev = evaluate_checkpoint(&ck, test, EvalOptions { refine: true, ..cfg.eval })?;
            if variant == Variant::Full {
                rows.push(AblationRow {
                    variant: Variant::NoPostnet,
                    seed,
                    report: ev.coarse,
                });
            }
            rows.push(AblationRow {
                variant,
                seed,
                report: ev.report,
            });
        }
    }
    rows.sort_by_key(|r| (r.variant, r.seed));
    let means = means(&rows, &Variant::ALL);
    Ok(AblationTable { rows, means })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use crate::score::{generate_corpus, CorpusConfig};

    fn tiny() -> (AblationConfig, Vec<Song>, Vec<Song>) {
        let corpus = CorpusConfig {
            songs: 3,
            test_songs: 1,
            words_min: 2,
            words_max: 3,
            ..Default::default()
        };
        let mut songs = generate_corpus(&corpus, &RngState::new(5)).unwrap();
        let test = songs.split_off(2);
        let train = TrainConfig {
            steps: 2,
            crop_words: 1,
            model: serde_json::json!({
                "encoder": {"hidden": 8, "fft_blocks": 1, "ffn_filter": 16},
                "length": {"hidden": 8, "conv_layers": 1},
                "denoiser": {"layers": 2, "residual_channels": 8},
                "mel": {"decoder_fft_blocks": 1, "postnet": {"layers": 2, "residual_channels": 8}},
                "diffusion_steps": 10
            }),
            log_every: 0,
            ..Default::default()
        };
        let cfg = AblationConfig {
            train,
            stage2_steps: 1,
            seeds: vec![0, 1],
            eval: EvalOptions::default(),
        };
        (cfg, songs, test)
    }

    #[test]
    fn table_has_every_variant_and_is_deterministic() {
        let (cfg, train, test) = tiny();
        let a = run_ablation(&cfg, &train, &test).unwrap();
        assert_eq!(a.rows.len(), 8);
        let vs: Vec<Variant> = a.means.iter().map(|m| m.variant).collect();
        assert_eq!(vs, Variant::ALL);
        assert_eq!(a.directions().len(), 3);
        let md = a.to_markdown();
        assert!(md.contains("w/o F0 diffusion") && md.contains("mcd_lite"));
        let b = run_ablation(&cfg, &train, &test).unwrap();
        assert_eq!(a, b);
        // the post-net ablation shares the full model's pitch sample
        let full = a.rows.iter().find(|r| r.variant == Variant::Full).unwrap();
        let nopost = a.rows.iter().find(|r| r.variant == Variant::NoPostnet).unwrap();
        assert_eq!((full.report.f0rmse, full.report.vde), (nopost.report.f0rmse, nopost.report.vde));
    }

    #[test]
    fn conflicting_base_toggles_are_rejected() {
        let (mut cfg, train, test) = tiny();
        cfg.train.postnet = false;
        assert_eq!(run_ablation(&cfg, &train, &test).unwrap_err().kind(), "config");
        cfg.train.postnet = true;
        cfg.train.uv_diffusion = false;
        cfg.train.f0_diffusion = false;
        assert_eq!(run_ablation(&cfg, &train, &test).unwrap_err().kind(), "config");
    }
}
