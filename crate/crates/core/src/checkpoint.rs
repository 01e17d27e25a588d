//! Binary checkpoint (`SCLW`) of a run between tasks.
//!
//! Layout, all integers little-endian:
//! magic `SCLW`, version u16, canonical config text, layer widths,
//! next task u32, shared weights, working biases, scores, history bitsets,
//! sparsity, archived subnetworks (task id, class set, per-layer bitsets,
//! biases), AdamW state, schedule position u64, partial report JSON.

use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{MlpArchitecture, ParameterSet};
use crate::optim::AdamWState;
use crate::report::RunReport;
use crate::train::{TrainState, Trainer};
use crate::wsn::{ScoredParameterSet, Subnetwork, TaskMask, WeightMask};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCLW";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
    /// Steps taken inside the current task; zero at task boundaries.
    pub schedule_position: u64,
    pub report: RunReport,
}

fn write_params(w: &mut Writer, p: &ParameterSet) {
    for t in &p.weights {
        w.tensor(t);
    }
    for b in &p.biases {
        w.f64s(b);
    }
}

fn read_params(r: &mut Reader, arch: &MlpArchitecture) -> Result<ParameterSet> {
    let mut weights = Vec::with_capacity(arch.num_layers());
    for l in 0..arch.num_layers() {
        let t = r.tensor()?;
        if (t.rows(), t.cols()) != arch.layer_shape(l) {
            return Err(r.fail(format!("layer {l} weight shape does not match the architecture")));
        }
        weights.push(t);
    }
    let biases = read_biases(r, arch)?;
    Ok(ParameterSet { weights, biases })
}

fn read_biases(r: &mut Reader, arch: &MlpArchitecture) -> Result<Vec<Vec<f64>>> {
    (0..arch.num_layers())
        .map(|l| {
            let b = r.f64s()?;
            if b.len() != arch.layer_shape(l).1 {
                return Err(r.fail(format!("layer {l} bias length does not match the architecture")));
            }
            Ok(b)
        })
        .collect()
}

fn write_mask(w: &mut Writer, m: &WeightMask) {
    for layer in m.layers() {
        w.len_u32(layer.len());
        w.bytes(&WeightMask::pack_layer(layer));
    }
}

fn read_mask(r: &mut Reader, arch: &MlpArchitecture) -> Result<WeightMask> {
    let mut layers = Vec::with_capacity(arch.num_layers());
    for l in 0..arch.num_layers() {
        let n = r.length()?;
        let (i, o) = arch.layer_shape(l);
        if n != i * o {
            return Err(r.fail(format!("layer {l} bitset has {n} bits, expected {}", i * o)));
        }
        let bytes = r.take(n.div_ceil(8))?;
        layers.push(WeightMask::unpack_layer(bytes, n));
    }
    Ok(WeightMask(layers))
}

impl Checkpoint {
    /// Snapshot of a trainer between tasks.
    pub fn at_boundary(trainer: &Trainer) -> Self {
        Checkpoint {
            config: trainer.cfg.clone(),
            state: trainer.state.clone(),
            schedule_position: 0,
            report: trainer.report.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.text(&self.config.canonical_text());
        let widths: Vec<u32> = self
            .config
            .architecture()
            .expect("validated config")
            .widths()
            .iter()
            .map(|&x| x as u32)
            .collect();
        w.u32s(&widths);
        w.u32(self.state.next_task as u32);

        let sps = &self.state.sps;
        write_params(&mut w, &sps.theta);
        for s in &sps.scores {
            w.f64s(s);
        }
        write_mask(&mut w, &sps.history_mask);
        w.f64(sps.sparsity_c);
        w.len_u32(sps.archive().len());
        for sub in sps.archive() {
            w.u32(sub.mask.task_id);
            w.u32s(&sub.mask.class_set);
            write_mask(&mut w, &sub.mask.mask);
            for b in &sub.biases {
                w.f64s(b);
            }
        }

        let opt = &self.state.optimizer;
        w.u64(opt.step_count);
        w.f64(opt.beta1);
        w.f64(opt.beta2);
        w.f64(opt.eps_num);
        w.f64(opt.weight_decay);
        write_params(&mut w, &opt.first_moment);
        write_params(&mut w, &opt.second_moment);

        w.u64(self.schedule_position);
        w.text(&self.report.to_json());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::format(0, "bad magic, expected SCLW"));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let cfg_at = r.offset();
        let config = RunConfig::parse(&r.text()?).map_err(|e| Error::format(cfg_at, e.to_string()))?;
        let arch = config
            .architecture()
            .map_err(|e| Error::format(cfg_at, e.to_string()))?;
        let widths_at = r.offset();
        let widths: Vec<usize> = r.u32s()?.into_iter().map(|x| x as usize).collect();
        if widths != arch.widths() {
            return Err(Error::format(
                widths_at,
                format!("stored widths {widths:?} disagree with config {:?}", arch.widths()),
            ));
        }
        let next_task = r.u32()? as usize;

        r.set_context("parameters");
        let theta = read_params(&mut r, &arch)?;
        let mut scores = Vec::with_capacity(arch.num_layers());
        for l in 0..arch.num_layers() {
            let s = r.f64s()?;
            if s.len() != theta.weights[l].len() {
                return Err(r.fail(format!("layer {l} score count mismatch")));
            }
            scores.push(s);
        }
        let history = read_mask(&mut r, &arch)?;
        let sparsity = r.f64()?;
        let n_archived = r.length()?;
        let mut archive = Vec::with_capacity(n_archived.min(1024));
        for i in 0..n_archived {
            r.set_context(format!("subnetwork {i}"));
            let task_id = r.u32()?;
            let class_set = r.u32s()?;
            let mask = read_mask(&mut r, &arch)?;
            let biases = read_biases(&mut r, &arch)?;
            archive.push(Subnetwork {
                mask: TaskMask {
                    task_id,
                    mask,
                    class_set,
                },
                biases,
            });
        }
        let sps = ScoredParameterSet::from_parts(theta, scores, history, sparsity, archive)
            .map_err(|e| r.fail(e.to_string()))?;

        r.set_context("optimizer");
        let step_count = r.u64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps_num = r.f64()?;
        let weight_decay = r.f64()?;
        let first_moment = read_params(&mut r, &arch)?;
        let second_moment = read_params(&mut r, &arch)?;
        let optimizer = AdamWState {
            step_count,
            first_moment,
            second_moment,
            beta1,
            beta2,
            eps_num,
            weight_decay,
        };

        r.set_context("trailer");
        let schedule_position = r.u64()?;
        let report_at = r.offset();
        let report = RunReport::from_json(&r.text()?).map_err(|e| Error::format(report_at, e.to_string()))?;
        if !r.is_at_end() {
            return Err(r.fail("trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            state: TrainState {
                sps,
                optimizer,
                next_task,
            },
            schedule_position,
            report,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads a checkpoint and checks that it belongs to `expected`.
    pub fn load_for(path: &Path, expected: &RunConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        let want = expected.architecture()?;
        let have = ck.config.architecture()?;
        if want != have {
            return Err(Error::format(
                0,
                format!("checkpoint architecture {:?} does not match {:?}", have.widths(), want.widths()),
            ));
        }
        if ck.config != *expected {
            return Err(Error::format(0, "checkpoint was written under a different configuration"));
        }
        Ok(ck)
    }
}
