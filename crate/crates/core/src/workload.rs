//! Seeded synthetic workloads: GEMM kernels for timing analysis and
//! conv-style layer suites for dataflow reordering.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::stream::SeededStream;
use crate::tensor::QuantTensor;

/// A GEMM `weights [m × n] · acts [n × k]` with an optional reduction order.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub name: String,
    pub weights: QuantTensor,
    pub acts: QuantTensor,
    pub order: Option<Vec<usize>>,
}

impl Workload {
    pub fn new(name: impl Into<String>, weights: QuantTensor, acts: QuantTensor) -> Self {
        Self {
            name: name.into(),
            weights,
            acts,
            order: None,
        }
    }

    pub fn order_or_identity(&self) -> Result<Vec<usize>> {
        let n = self.weights.shape2()?.1;
        Ok(self.order.clone().unwrap_or_else(|| (0..n).collect()))
    }
}

/// Manifest entry pointing at two tensor files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadEntry {
    pub name: String,
    pub weights: String,
    pub acts: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteManifest {
    pub workloads: Vec<WorkloadEntry>,
}

/// Write every workload's tensors under `dir` plus a `suite.json` manifest.
pub fn write_suite(dir: &Path, workloads: &[Workload]) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(workloads.len());
    for wl in workloads {
        let w = io::write_tensor(dir, &format!("{}_w", wl.name), &wl.weights)?;
        let x = io::write_tensor(dir, &format!("{}_x", wl.name), &wl.acts)?;
        entries.push(WorkloadEntry {
            name: wl.name.clone(),
            weights: file_name(&w),
            acts: file_name(&x),
        });
    }
    let path = dir.join("suite.json");
    io::write_json(&path, &SuiteManifest { workloads: entries })?;
    Ok(path)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn read_suite(manifest_path: &Path) -> Result<Vec<Workload>> {
    let manifest: SuiteManifest = io::read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .workloads
        .iter()
        .map(|e| {
            let weights = io::read_tensor(&base.join(&e.weights))?;
            let acts = io::read_tensor(&base.join(&e.acts))?;
            let (_, n) = weights.shape2()?;
            let (n2, _) = acts.shape2()?;
            if n != n2 {
                return Err(Error::invalid(format!(
                    "{}: workload {:?} has weights with {n} columns but activations with {n2} rows",
                    manifest_path.display(),
                    e.name
                )));
            }
            Ok(Workload::new(e.name.clone(), weights, acts))
        })
        .collect()
}

/// Shape and operand ranges of one unsigned timing-analysis kernel.
#[derive(Debug, Clone, Copy)]
struct KernelShape {
    name: &'static str,
    rows: usize,
    depth: usize,
    cols: usize,
    max_act: i64,
    max_w: i64,
}

const DTA_KERNELS: [KernelShape; 10] = [
    KernelShape {
        name: "sha_like",
        rows: 8,
        depth: 64,
        cols: 8,
        max_act: 90,
        max_w: 60,
    },
    KernelShape {
        name: "aes_cbc_like",
        rows: 8,
        depth: 96,
        cols: 8,
        max_act: 127,
        max_w: 100,
    },
    KernelShape {
        name: "fir_like",
        rows: 8,
        depth: 32,
        cols: 16,
        max_act: 127,
        max_w: 80,
    },
    KernelShape {
        name: "bubblesort_like",
        rows: 8,
        depth: 16,
        cols: 8,
        max_act: 3,
        max_w: 3,
    },
    KernelShape {
        name: "motion_detection_like",
        rows: 8,
        depth: 48,
        cols: 8,
        max_act: 80,
        max_w: 50,
    },
    KernelShape {
        name: "cnn_like",
        rows: 16,
        depth: 128,
        cols: 8,
        max_act: 127,
        max_w: 90,
    },
    KernelShape {
        name: "convolution_like",
        rows: 16,
        depth: 128,
        cols: 8,
        max_act: 120,
        max_w: 95,
    },
    KernelShape {
        name: "filter2d_like",
        rows: 8,
        depth: 9,
        cols: 16,
        max_act: 127,
        max_w: 127,
    },
    KernelShape {
        name: "matmul_like",
        rows: 16,
        depth: 64,
        cols: 16,
        max_act: 100,
        max_w: 80,
    },
    KernelShape {
        name: "dct_like",
        rows: 8,
        depth: 8,
        cols: 8,
        max_act: 127,
        max_w: 90,
    },
];

/// Ten unsigned kernels whose accumulators never change sign, so each one's
/// activated paths stay below the static worst case by a kernel-specific
/// margin. `bubblesort_like` uses tiny operands and the shortest paths.
pub fn dta_suite(seed: u64) -> Vec<Workload> {
    DTA_KERNELS
        .iter()
        .enumerate()
        .map(|(idx, k)| {
            let mut s = SeededStream::with_stream(seed, idx as u64);
            let w = QuantTensor::from_fn(k.rows, k.depth, 1.0, |_, _| s.next_range_i64(0, k.max_w) as i8);
            let x = QuantTensor::from_fn(k.depth, k.cols, 1.0, |_, _| s.next_range_i64(0, k.max_act) as i8);
            Workload::new(k.name, w, x)
        })
        .collect()
}

/// Parameters of one synthetic conv layer lowered to GEMM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerShape {
    pub c_out: usize,
    pub c_in: usize,
    /// Output pixels simulated (GEMM columns).
    pub pixels: usize,
    /// Latent sign-pattern groups among output channels.
    pub groups: usize,
}

/// ResNet-like progression: output channels grow with depth.
pub const READ_SUITE: [LayerShape; 6] = [
    LayerShape {
        c_out: 16,
        c_in: 27,
        pixels: 16,
        groups: 2,
    },
    LayerShape {
        c_out: 32,
        c_in: 64,
        pixels: 16,
        groups: 4,
    },
    LayerShape {
        c_out: 64,
        c_in: 64,
        pixels: 12,
        groups: 4,
    },
    LayerShape {
        c_out: 64,
        c_in: 128,
        pixels: 12,
        groups: 8,
    },
    LayerShape {
        c_out: 128,
        c_in: 128,
        pixels: 8,
        groups: 8,
    },
    LayerShape {
        c_out: 128,
        c_in: 256,
        pixels: 8,
        groups: 8,
    },
];

/// A conv-style layer with structured weight signs and post-ReLU activations.
///
/// Each input channel has a base probability of a non-negative weight; each
/// latent group of output channels shifts that probability per channel.
/// Activations are non-negative with about half of them zero.
pub fn synthetic_layer(name: &str, shape: LayerShape, seed: u64) -> Workload {
    let mut s = SeededStream::new(seed);
    let base: Vec<f64> = (0..shape.c_in).map(|_| 0.2 + 0.6 * s.next_f64()).collect();
    let groups = shape.groups.max(1);
    let prefs: Vec<Vec<f64>> = (0..groups)
        .map(|_| {
            base.iter()
                .map(|&b| {
                    let shift = if s.next_bool(0.5) { 0.35 } else { -0.35 };
                    (b + shift).clamp(0.03, 0.97)
                })
                .collect()
        })
        .collect();
    let mut assignment: Vec<usize> = (0..shape.c_out).map(|r| r % groups).collect();
    s.shuffle(&mut assignment);
    let w = QuantTensor::from_fn(shape.c_out, shape.c_in, 0.02, |r, c| {
        let mag = (s.next_normal().abs() * 24.0).round().clamp(1.0, 127.0) as i8;
        if s.next_bool(prefs[assignment[r]][c]) {
            mag
        } else {
            -mag
        }
    });
    let x = QuantTensor::from_fn(shape.c_in, shape.pixels, 0.05, |_, _| {
        if s.next_bool(0.5) {
            0
        } else {
            (-(1.0 - s.next_f64()).ln() * 24.0).round().clamp(0.0, 127.0) as i8
        }
    });
    Workload::new(name, w, x)
}

pub fn read_layer_suite(seed: u64) -> Vec<Workload> {
    READ_SUITE
        .iter()
        .enumerate()
        .map(|(i, &shape)| {
            synthetic_layer(
                &format!("layer{i}_{}x{}", shape.c_out, shape.c_in),
                shape,
                seed.wrapping_add(i as u64 * 0x9E37_79B9),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dta_suite_is_unsigned_and_deterministic() {
        let a = dta_suite(3);
        let b = dta_suite(3);
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        for wl in &a {
            assert!(wl.weights.data().iter().all(|&v| v >= 0));
            assert!(wl.acts.data().iter().all(|&v| v >= 0));
        }
    }

    #[test]
    fn read_layers_have_nonnegative_activations() {
        for wl in read_layer_suite(1) {
            assert!(wl.acts.data().iter().all(|&v| v >= 0), "{}", wl.name);
            let (m, n) = wl.weights.shape2().unwrap();
            assert_eq!(wl.acts.shape2().unwrap().0, n);
            assert!(m >= 16);
        }
    }

    #[test]
    fn suite_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let suite = dta_suite(5);
        let manifest = write_suite(dir.path(), &suite).unwrap();
        let back = read_suite(&manifest).unwrap();
        assert_eq!(back, suite);
    }

    #[test]
    fn missing_tensor_file_is_io_error_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_suite(dir.path(), &dta_suite(5)[..1]).unwrap();
        std::fs::remove_file(dir.path().join("sha_like_x.json")).unwrap();
        let err = read_suite(&manifest).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("sha_like_x.json"));
    }
}
