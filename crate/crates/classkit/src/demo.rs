//! Demonstration storage: loading, saving, and windowing trajectories into
//! the (observation, action-window) pairs the rest of the pipeline consumes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("demo '{id}': {message}")]
    Invalid { id: String, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("window index ({demo_ord}, {t}) out of range")]
    IndexOutOfRange { demo_ord: usize, t: usize },
}

/// One demonstration trajectory. All three sequences share the same length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: String,
    #[serde(rename = "obs")]
    pub observations: Vec<Vec<f64>>,
    pub proprio: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub meta: BTreeMap<String, String>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Checks the structural invariants: equal lengths, consistent
    /// per-field dimensions, and finite values everywhere.
    pub fn validate(&self) -> Result<(), DemoError> {
        let invalid = |message: String| DemoError::Invalid {
            id: self.id.clone(),
            message,
        };
        let len = self.observations.len();
        if len == 0 {
            return Err(invalid("zero-length demonstration".into()));
        }
        if self.proprio.len() != len || self.actions.len() != len {
            return Err(invalid(format!(
                "length mismatch: obs {}, proprio {}, actions {}",
                len,
                self.proprio.len(),
                self.actions.len()
            )));
        }
        for (name, field) in [
            ("obs", &self.observations),
            ("proprio", &self.proprio),
            ("actions", &self.actions),
        ] {
            let dim = field[0].len();
            for (t, v) in field.iter().enumerate() {
                if v.len() != dim {
                    return Err(invalid(format!(
                        "{name}[{t}] has dim {} but {name}[0] has dim {dim}",
                        v.len()
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(invalid(format!("{name}[{t}] contains a non-finite value")));
                }
            }
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.observations[0].len()
    }

    pub fn proprio_dim(&self) -> usize {
        self.proprio[0].len()
    }

    pub fn action_dim(&self) -> usize {
        self.actions[0].len()
    }
}

/// An immutable collection of demonstrations, safe for concurrent reads.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub demos: Vec<Demonstration>,
}

impl Dataset {
    pub fn new(demos: Vec<Demonstration>) -> Result<Self, DemoError> {
        for d in &demos {
            d.validate()?;
        }
        Ok(Dataset { demos })
    }

    pub fn total_timesteps(&self) -> usize {
        self.demos.iter().map(|d| d.len()).sum()
    }
}

/// Handle identifying one anchor timestep within a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowIndex {
    pub demo_ord: usize,
    pub t: usize,
}

/// A fixed-length slice of future actions starting at `index`. Windows
/// extending past the end of a demonstration repeat its final action.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionWindow {
    pub index: WindowIndex,
    pub actions: Vec<Vec<f64>>,
}

/// Loads a JSON-Lines dataset: one object per demonstration with keys
/// `id`, `obs`, `proprio`, `actions`, `meta`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DemoError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DemoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut demos = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DemoError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let demo: Demonstration =
            serde_json::from_str(&line).map_err(|e| DemoError::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
        demo.validate()?;
        demos.push(demo);
    }
    Ok(Dataset { demos })
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DemoError> {
    let path = path.as_ref();
    let io_err = |source| DemoError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    for demo in &dataset.demos {
        let line = serde_json::to_string(demo).expect("demonstration serializes");
        writeln!(writer, "{line}").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)?;
    Ok(())
}

/// Enumerates action windows of length `horizon` at timesteps
/// 0, stride, 2*stride, ... per demonstration, padding past-the-end
/// windows by repeating the final action.
pub fn enumerate_windows(
    dataset: &Dataset,
    horizon: usize,
    stride: usize,
) -> Result<Vec<ActionWindow>, DemoError> {
    assert!(horizon >= 1, "horizon must be positive");
    assert!(stride >= 1, "stride must be positive");
    if dataset.demos.is_empty() {
        return Err(DemoError::EmptyDataset);
    }
    let mut windows = Vec::new();
    for (demo_ord, demo) in dataset.demos.iter().enumerate() {
        let len = demo.len();
        let mut t = 0;
        while t < len {
            let mut actions = Vec::with_capacity(horizon);
            for k in 0..horizon {
                let src = (t + k).min(len - 1);
                actions.push(demo.actions[src].clone());
            }
            windows.push(ActionWindow {
                index: WindowIndex { demo_ord, t },
                actions,
            });
            t += stride;
        }
    }
    Ok(windows)
}

/// Returns the observation and proprioception at the anchor timestep.
pub fn observation_at(
    dataset: &Dataset,
    index: WindowIndex,
) -> Result<(&[f64], &[f64]), DemoError> {
    let demo = dataset
        .demos
        .get(index.demo_ord)
        .ok_or(DemoError::IndexOutOfRange {
            demo_ord: index.demo_ord,
            t: index.t,
        })?;
    if index.t >= demo.len() {
        return Err(DemoError::IndexOutOfRange {
            demo_ord: index.demo_ord,
            t: index.t,
        });
    }
    Ok((&demo.observations[index.t], &demo.proprio[index.t]))
}
