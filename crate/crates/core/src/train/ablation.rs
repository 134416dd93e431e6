use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::model::{TrainSample, CODEBOOK_GROUP, DENOISER_GROUP};
use super::trainer::{evaluate_weathers, train, TrainOptions, WeatherSplit};
use crate::error::{Error, Result};
use crate::eval::{APResult, Metric};
use crate::scene::Difficulty;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    Wad,
    WcWad,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Wad, Variant::WcWad];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Wad => "+WAD",
            Variant::WcWad => "+WC+WAD",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    /// `(use_codebook, use_wad)`.
    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::Wad => (false, true),
            Variant::WcWad => (true, true),
        }
    }

    pub fn configure(self, base: &ExperimentConfig, timesteps: usize, seed: u64) -> ExperimentConfig {
        let mut cfg = base.clone();
        (cfg.ablation.use_codebook, cfg.ablation.use_wad) = self.flags();
        cfg.diffusion.timesteps = timesteps;
        cfg.seed = seed;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMatrix {
    pub variants: Vec<Variant>,
    pub timesteps: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl AblationMatrix {
    /// Module ablation at one T.
    pub fn modules(timesteps: usize, seeds: Vec<u64>) -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            timesteps: vec![timesteps],
            seeds,
        }
    }

    /// Every variant at T ∈ {5, 10, 15, 20}.
    pub fn full(seeds: Vec<u64>) -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            timesteps: vec![5, 10, 15, 20],
            seeds,
        }
    }

    /// Cells in table order: variant, then T, then seed.
    pub fn cells(&self) -> Vec<(Variant, usize, u64)> {
        let mut out = Vec::new();
        for &v in &self.variants {
            for &t in &self.timesteps {
                for &s in &self.seeds {
                    out.push((v, t, s));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Trained,
    /// Copied from the run at this T; the variant has no diffusion stage.
    Shared(usize),
    Skipped(String),
}

impl CellStatus {
    fn label(&self) -> &'static str {
        match self {
            CellStatus::Trained => "trained",
            CellStatus::Shared(_) => "shared",
            CellStatus::Skipped(_) => "skipped",
        }
    }

    fn note(&self) -> String {
        match self {
            CellStatus::Trained => String::new(),
            CellStatus::Shared(t) => format!("no diffusion stage; same run as T={t}"),
            CellStatus::Skipped(r) => r.clone(),
        }
    }
}

/// Outcome of one trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub config_hash: String,
    pub num_params: usize,
    pub codebook_params: usize,
    pub denoiser_params: usize,
    pub final_loss: f64,
    pub losses_finite: bool,
    pub clear: APResult,
    pub foggy: APResult,
    /// Headline AP at each configured clear fraction.
    pub curve: Vec<(f64, f64)>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub timesteps: usize,
    pub seed: u64,
    pub status: CellStatus,
    pub result: Option<CellResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub metric: Metric,
    pub difficulty: Difficulty,
    pub iou_threshold: f64,
    pub clear_fractions: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

/// Trains and evaluates one model.
pub fn run_cell(config: &ExperimentConfig, data: &[TrainSample], val: &WeatherSplit) -> Result<CellResult> {
    let (model, report) = train(config, data, None, &TrainOptions::default())?;
    let (det, clear, foggy) = evaluate_weathers(&model, config, val)?;
    let e = &config.eval;
    let curve = det
        .robustness_curve(&e.clear_fractions, e.mixture_seed, e.iou_threshold, &config.data.scene.difficulty)?
        .into_iter()
        .map(|(f, r)| (f, r.get(e.metric, e.difficulty)))
        .collect();
    Ok(CellResult {
        config_hash: config.hash(),
        num_params: model.num_params(),
        codebook_params: model.params.group_numel(CODEBOOK_GROUP),
        denoiser_params: model.params.group_numel(DENOISER_GROUP),
        final_loss: report.final_loss().unwrap_or(f64::NAN),
        losses_finite: report.steps.iter().all(|s| s.total.is_finite()),
        clear,
        foggy,
        curve,
        seconds: report.wall_seconds,
    })
}

/// Runs every cell of `matrix` on a shared dataset. Variants without a
/// diffusion stage are trained once per seed and shared across T; cells
/// whose config fails validation are skipped with the reason.
pub fn run_ablation(
    base: &ExperimentConfig,
    matrix: &AblationMatrix,
    data: &[TrainSample],
    val: &WeatherSplit,
) -> Result<AblationReport> {
    base.validate()?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for (variant, t, seed) in matrix.cells() {
        let cfg = variant.configure(base, t, seed);
        let shared = if variant.flags().1 {
            None
        } else {
            rows.iter()
                .find(|r| r.variant == variant && r.seed == seed && r.status == CellStatus::Trained)
                .map(|r| (r.timesteps, r.result.clone()))
        };
        let (status, result) = if let Some((t0, res)) = shared {
            (CellStatus::Shared(t0), res)
        } else if let Err(e) = cfg.validate() {
            (CellStatus::Skipped(e.to_string()), None)
        } else {
            log::info!("training {} T={} seed={}", variant.name(), t, seed);
            let r = run_cell(&cfg, data, val)?;
            log::info!(
                "{} T={} seed={} foggy {:.4} clear {:.4} ({:.0}s)",
                variant.name(),
                t,
                seed,
                r.foggy.get(base.eval.metric, base.eval.difficulty),
                r.clear.get(base.eval.metric, base.eval.difficulty),
                r.seconds
            );
            (CellStatus::Trained, Some(r))
        };
        rows.push(AblationRow {
            variant,
            timesteps: t,
            seed,
            status,
            result,
        });
    }
    Ok(AblationReport {
        metric: base.eval.metric,
        difficulty: base.eval.difficulty,
        iou_threshold: base.eval.iou_threshold,
        clear_fractions: base.eval.clear_fractions.clone(),
        rows,
    })
}

impl AblationReport {
    pub fn row(&self, variant: Variant, timesteps: usize, seed: u64) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.timesteps == timesteps && r.seed == seed)
    }

    /// Headline foggy AP of one cell.
    pub fn foggy_ap(&self, variant: Variant, timesteps: usize, seed: u64) -> Option<f64> {
        let r = self.row(variant, timesteps, seed)?.result.as_ref()?;
        Some(r.foggy.get(self.metric, self.difficulty))
    }

    /// Max − min of the headline AP over the given clear fractions.
    pub fn spread(&self, variant: Variant, timesteps: usize, seed: u64, fractions: &[f64]) -> Option<f64> {
        let r = self.row(variant, timesteps, seed)?.result.as_ref()?;
        let vals: Vec<f64> = fractions
            .iter()
            .map(|f| r.curve.iter().find(|(x, _)| (x - f).abs() < 1e-9).map(|(_, ap)| *ap))
            .collect::<Option<_>>()?;
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        Some(max - min)
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "variant", "timesteps", "seed", "status", "note", "config_hash", "num_params", "codebook_params",
            "denoiser_params", "final_loss", "seconds",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for weather in ["foggy", "clear"] {
            for m in Metric::ALL {
                for d in Difficulty::ALL {
                    h.push(format!("{weather}_{}_{}", m.name(), d.name()));
                }
            }
        }
        for f in &self.clear_fractions {
            h.push(format!("mix_{f:.2}"));
        }
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.csv_header())?;
        for r in &self.rows {
            let mut rec = vec![
                r.variant.name().to_string(),
                r.timesteps.to_string(),
                r.seed.to_string(),
                r.status.label().to_string(),
                r.status.note(),
            ];
            match &r.result {
                Some(x) => {
                    rec.extend([
                        x.config_hash.clone(),
                        x.num_params.to_string(),
                        x.codebook_params.to_string(),
                        x.denoiser_params.to_string(),
                        x.final_loss.to_string(),
                        format!("{:.1}", x.seconds),
                    ]);
                    for res in [&x.foggy, &x.clear] {
                        for m in Metric::ALL {
                            for d in Difficulty::ALL {
                                rec.push(format!("{:.6}", res.get(m, d)));
                            }
                        }
                    }
                    rec.extend(x.curve.iter().map(|(_, ap)| format!("{ap:.6}")));
                }
                None => rec.resize(self.csv_header().len(), String::new()),
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Seed means per (variant, T) of the headline metric.
    pub fn markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "AP40 ({}, IoU {}), mean over seeds\n",
            match self.metric {
                Metric::Bev => "BEV",
                Metric::ThreeD => "3D",
            },
            self.iou_threshold
        );
        out.push_str("| Variant | T | Foggy Easy | Foggy Mod. | Foggy Hard | Clear Easy | Clear Mod. | Clear Hard | Seeds |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|\n");
        let mut keys: Vec<(Variant, usize)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.variant, r.timesteps)) {
                keys.push((r.variant, r.timesteps));
            }
        }
        for (v, t) in keys {
            let results: Vec<&CellResult> = self
                .rows
                .iter()
                .filter(|r| r.variant == v && r.timesteps == t)
                .filter_map(|r| r.result.as_ref())
                .collect();
            let _ = write!(out, "| {} | {} |", v.name(), t);
            if results.is_empty() {
                out.push_str(" skipped | | | | | | 0 |\n");
                continue;
            }
            let n = results.len() as f64;
            for weather in 0..2 {
                for d in Difficulty::ALL {
                    let mean = results
                        .iter()
                        .map(|r| if weather == 0 { &r.foggy } else { &r.clear }.get(self.metric, d))
                        .sum::<f64>()
                        / n;
                    let _ = write!(out, " {:.2} |", 100.0 * mean);
                }
            }
            let _ = writeln!(out, " {} |", results.len());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_pairs;
    use crate::train::trainer::tests::tiny_config;

    #[test]
    fn cells_enumerate_the_matrix() {
        let m = AblationMatrix::full(vec![0, 1, 2]);
        assert_eq!(m.cells().len(), 3 * 4 * 3);
        assert_eq!(m.cells()[0], (Variant::Baseline, 5, 0));
    }

    #[test]
    fn variants_round_trip_names() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("+WC").is_err());
    }

    #[test]
    fn small_matrix_report() {
        let mut cfg = tiny_config();
        cfg.eval.clear_fractions = vec![0.0, 0.5, 1.0];
        let pairs = build_pairs(&cfg.data.scene, 0, 4, 0.1).unwrap();
        let data: Vec<TrainSample> = pairs.iter().map(TrainSample::from).collect();
        let val = WeatherSplit::from_pairs(&pairs[..2]);
        let matrix = AblationMatrix {
            variants: Variant::ALL.to_vec(),
            timesteps: vec![2, 3],
            seeds: vec![0],
        };
        let report = run_ablation(&cfg, &matrix, &data, &val).unwrap();
        assert_eq!(report.rows.len(), 6);
        let base2 = report.row(Variant::Baseline, 2, 0).unwrap();
        let base3 = report.row(Variant::Baseline, 3, 0).unwrap();
        assert_eq!(base3.status, CellStatus::Shared(2));
        assert_eq!(base2.result, base3.result);
        let b = base2.result.as_ref().unwrap();
        assert_eq!((b.codebook_params, b.denoiser_params), (0, 0));
        let w = report.row(Variant::Wad, 3, 0).unwrap().result.as_ref().unwrap();
        assert_eq!(w.codebook_params, 0);
        assert!(w.denoiser_params > 0);
        assert!(report.spread(Variant::WcWad, 2, 0, &[0.0, 0.5, 1.0]).is_some());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ablation.csv");
        report.write_csv(&path).unwrap();
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        assert_eq!(rdr.headers().unwrap().len(), report.csv_header().len());
        assert_eq!(rdr.records().count(), 6);
        let md = report.markdown();
        assert_eq!(md.lines().filter(|l| l.starts_with("| +") || l.starts_with("| baseline")).count(), 6);
    }

    #[test]
    fn single_cell_matrix_gives_one_row() {
        let cfg = tiny_config();
        let pairs = build_pairs(&cfg.data.scene, 0, 2, 0.1).unwrap();
        let data: Vec<TrainSample> = pairs.iter().map(TrainSample::from).collect();
        let val = WeatherSplit::from_pairs(&pairs);
        let matrix = AblationMatrix {
            variants: vec![Variant::Baseline],
            timesteps: vec![2],
            seeds: vec![4],
        };
        let report = run_ablation(&cfg, &matrix, &data, &val).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].status, CellStatus::Trained);
    }
}
