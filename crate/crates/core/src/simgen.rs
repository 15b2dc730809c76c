//! Simulated two-feature datasets with a controllable binary confounder.
//!
//! Each sample draws a balanced label `y`, a confounder `c` that agrees with
//! `y` with probability `(1 + rho) / 2`, and a feature vector
//!
//! ```text
//! h = label_shift * (2y - 1) * (1, 0) + confounder_shift * (2c - 1) * (0, 1) + eps
//! eps ~ N(0, noise_sd^2 I)
//! ```
//!
//! Instances 1-4 make `c` easy to decode from `h`, instances 5-8 make it
//! hard. Within a row the correlation between `c` and `y` sweeps up and back
//! down. The final layer is a logistic fit of `y` on `h`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{
    Checkpoint, CovariateColumn, CovariateDescriptor, CovariateKind, CovariateTable, FinalLayer,
    LabelTable, Link, LoadedRun, RepresentationMatrix, RunData, RunMeta, Task, ValidationReport,
    SCHEMA_VERSION,
};
use crate::probes::{fit_logistic_probe, ProbeError, DEFAULT_LOGISTIC_RIDGE};

pub const INSTANCE_COUNT: u32 = 8;
pub const MIN_SAMPLES: usize = 100;
pub const CHECKPOINT_LABEL: &str = "final";
pub const CONFOUNDER: &str = "c";
pub const NOISE_COVARIATE: &str = "noise";

const NOISE_SD: f64 = 0.5;
const TOP_ROW_SHIFT: f64 = 1.5;
const BOTTOM_ROW_SHIFT: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("instance id must be in 1..=8, got {0}")]
    InvalidInstance(u32),
    #[error("at least {MIN_SAMPLES} samples are required, got {0}")]
    TooFewSamples(usize),
    #[error("final layer fit failed: {0}")]
    FinalLayer(#[from] ProbeError),
    #[error("final layer did not converge")]
    FinalLayerNotConverged,
    #[error("resampling requires a binary-classification run")]
    NotClassification,
    #[error("unknown covariate '{0}'")]
    UnknownCovariate(String),
    #[error("covariate '{0}' is not binary categorical")]
    NotBinary(String),
    #[error("cannot balance: empty cell (c={c}, y={y}) for covariate '{covariate}'")]
    EmptyCell { covariate: String, c: String, y: u8 },
    #[error("generated run is invalid:\n{0}")]
    Invalid(ValidationReport),
}

/// Correlation between `c` and `y` for an instance:
/// top row `(0, 0.5, 1, 0.5)`, bottom row `(0.5, 1, 0.5, 0)`.
pub fn correlation_schedule(instance_id: u32) -> Result<f64, SimError> {
    const SCHEDULE: [f64; 8] = [0.0, 0.5, 1.0, 0.5, 0.5, 1.0, 0.5, 0.0];
    match instance_id {
        1..=INSTANCE_COUNT => Ok(SCHEDULE[instance_id as usize - 1]),
        _ => Err(SimError::InvalidInstance(instance_id)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimInstanceSpec {
    pub instance_id: u32,
    pub n: usize,
    pub seed: u64,
    pub label_shift: f64,
    pub confounder_shift: f64,
    pub noise_sd: f64,
    pub rho: f64,
}

impl SimInstanceSpec {
    pub fn new(instance_id: u32, n: usize, seed: u64) -> Result<Self, SimError> {
        let rho = correlation_schedule(instance_id)?;
        if n < MIN_SAMPLES {
            return Err(SimError::TooFewSamples(n));
        }
        let shift = if instance_id <= 4 {
            TOP_ROW_SHIFT
        } else {
            BOTTOM_ROW_SHIFT
        };
        Ok(SimInstanceSpec {
            instance_id,
            n,
            seed,
            label_shift: shift,
            confounder_shift: shift,
            noise_sd: NOISE_SD,
            rho,
        })
    }

    /// Probability that `c` equals `y`.
    pub fn agreement_probability(&self) -> f64 {
        (1.0 + self.rho) / 2.0
    }

    pub fn is_top_row(&self) -> bool {
        self.instance_id <= 4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimBundle {
    pub spec: SimInstanceSpec,
    pub run: LoadedRun,
}

/// Generates one instance. Deterministic in `(instance_id, n, seed)`.
pub fn generate_instance(instance_id: u32, n: usize, seed: u64) -> Result<SimBundle, SimError> {
    let spec = SimInstanceSpec::new(instance_id, n, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(instance_id));
    let eps = Normal::new(0.0, spec.noise_sd).expect("positive noise sd");
    let p_agree = spec.agreement_probability();

    let mut y = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    let mut flat = Vec::with_capacity(2 * n);
    let mut noise = Vec::with_capacity(n);
    for _ in 0..n {
        let yi = u8::from(rng.random::<f64>() < 0.5);
        let ci = if rng.random::<f64>() < p_agree {
            yi
        } else {
            1 - yi
        };
        let sy = 2.0 * f64::from(yi) - 1.0;
        let sc = 2.0 * f64::from(ci) - 1.0;
        flat.push(spec.label_shift * sy + eps.sample(&mut rng));
        flat.push(spec.confounder_shift * sc + eps.sample(&mut rng));
        let z: f64 = StandardNormal.sample(&mut rng);
        noise.push(Some(z));
        y.push(f64::from(yi));
        c.push(Some(usize::from(ci)));
    }
    let h = DMatrix::from_row_slice(n, 2, &flat);
    let layer = fit_logistic_probe(&h, &y, DEFAULT_LOGISTIC_RIDGE)?;
    if !layer.converged {
        return Err(SimError::FinalLayerNotConverged);
    }
    let y_score: Vec<f64> = (0..n)
        .map(|i| {
            let eta = h[(i, 0)] * layer.weights[0] + h[(i, 1)] * layer.weights[1] + layer.intercept;
            1.0 / (1.0 + (-eta).exp())
        })
        .collect();

    let ids: Vec<String> = (0..n).map(|i| format!("s{i:05}")).collect();
    let data = RunData {
        meta: RunMeta {
            schema_version: SCHEMA_VERSION,
            run_id: format!("sim-instance-{instance_id}"),
            task: Task::BinaryClassification,
            n,
            d: 2,
            checkpoints: vec![CHECKPOINT_LABEL.to_string()],
            covariates: vec![
                CovariateDescriptor::categorical(CONFOUNDER, ["0", "1"]),
                CovariateDescriptor::continuous(NOISE_COVARIATE),
            ],
        },
        checkpoints: vec![Checkpoint {
            representations: RepresentationMatrix {
                checkpoint: CHECKPOINT_LABEL.to_string(),
                values: h,
                sample_ids: ids.clone(),
            },
            final_layer: FinalLayer {
                checkpoint: CHECKPOINT_LABEL.to_string(),
                weights: layer.weights,
                bias: layer.intercept,
                link: Link::Sigmoid,
            },
        }],
        labels: LabelTable {
            sample_ids: ids.clone(),
            y_true: y,
            y_score,
        },
        covariates: CovariateTable {
            sample_ids: ids,
            columns: vec![
                CovariateColumn::Categorical(c),
                CovariateColumn::Continuous(noise),
            ],
        },
    };
    let run = LoadedRun::new(data).map_err(SimError::Invalid)?;
    Ok(SimBundle { spec, run })
}

/// Subsamples without replacement so that all four `(c, y)` cells have the
/// size of the smallest cell, which makes the empirical correlation of `c`
/// and `y` exactly zero. Samples keep their original order and ids, and the
/// final layers are left untouched.
pub fn resample_deconfound(
    run: &LoadedRun,
    covariate: &str,
    seed: u64,
) -> Result<LoadedRun, SimError> {
    if run.meta.task != Task::BinaryClassification {
        return Err(SimError::NotClassification);
    }
    let (desc, column) = run
        .covariate(covariate)
        .ok_or_else(|| SimError::UnknownCovariate(covariate.to_string()))?;
    let codes = match column {
        CovariateColumn::Categorical(codes)
            if desc.kind == CovariateKind::Categorical && desc.categories().len() == 2 =>
        {
            codes
        }
        _ => return Err(SimError::NotBinary(covariate.to_string())),
    };

    let mut cells: [Vec<usize>; 4] = Default::default();
    for (i, (code, &y)) in codes.iter().zip(&run.labels.y_true).enumerate() {
        if let Some(c) = code {
            cells[2 * c + usize::from(y == 1.0)].push(i);
        }
    }
    for (k, cell) in cells.iter().enumerate() {
        if cell.is_empty() {
            return Err(SimError::EmptyCell {
                covariate: covariate.to_string(),
                c: desc.categories()[k / 2].clone(),
                y: (k % 2) as u8,
            });
        }
    }
    let m = cells.iter().map(Vec::len).min().expect("four cells");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(4 * m);
    for cell in &mut cells {
        cell.shuffle(&mut rng);
        keep.extend_from_slice(&cell[..m]);
    }
    keep.sort_unstable();

    let mut data = run.data().select_samples(&keep);
    data.meta.run_id = format!("{}-deconf-{covariate}", run.meta.run_id);
    LoadedRun::new(data).map_err(SimError::Invalid)
}
