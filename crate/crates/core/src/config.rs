//! Run configuration: dataset, network, every loss knob and the schedule,
//! stored as one flat JSON object.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{self, CifarVariant, RawGeometry, Sample, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gda::BlockGrid;
use crate::network::{Arch, ArchFlags, BnMode, RECAL_BATCH, RECAL_PASSES};
use crate::principal::ReliabilityKind;
use crate::trainer::Schedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixupKind {
    Normal,
    #[serde(rename = "self")]
    SelfMix,
    None,
}

/// Loss weights and augmentation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Principal-probability threshold ratio.
    pub a: f64,
    pub mixup: MixupKind,
    pub alpha: f64,
    pub eps: f64,
    pub delta_gvat: f64,
    pub rho_gccb: f64,
    pub m_ccb: usize,
    pub mag_cont: f64,
    pub mag_bri: f64,
    pub rho_groi: f64,
    pub m_roi: usize,
    pub lambda_rate: f64,
    pub zeta_groi: f64,
    pub delta_xu: f64,
    pub zeta_xu: f64,
    pub beta: f64,
    pub inner: bool,
    /// Leave each confident sample out of its own partner search.
    pub inner_exclude_self: bool,
    pub reliability: ReliabilityKind,
    pub label_reliability: ReliabilityKind,
    /// Normalization of the frozen target forwards.
    pub frozen_bn: BnMode,
}

impl HyperParams {
    /// Every unlabeled term and the collaborative mix switched off.
    pub fn supervised_only(&self) -> Self {
        Self {
            delta_gvat: 0.0,
            rho_gccb: 0.0,
            rho_groi: 0.0,
            delta_xu: 0.0,
            inner: false,
            ..self.clone()
        }
    }

    fn svhn(a: f64, alpha: f64) -> Self {
        Self {
            a,
            mixup: MixupKind::SelfMix,
            alpha,
            eps: 3.5,
            delta_gvat: 1.0,
            rho_gccb: 1.2,
            m_ccb: 8,
            mag_cont: 0.4,
            mag_bri: 0.1,
            rho_groi: 0.9,
            m_roi: 4,
            lambda_rate: 0.5,
            zeta_groi: 0.8,
            delta_xu: 0.0,
            zeta_xu: 0.5,
            beta: 0.8,
            inner: true,
            inner_exclude_self: false,
            reliability: ReliabilityKind::Entropy,
            label_reliability: ReliabilityKind::Inner,
            frozen_bn: BnMode::Batch,
        }
    }

    fn cifar(a: f64, mixup: MixupKind, zeta_groi: f64) -> Self {
        Self {
            a,
            mixup,
            alpha: 0.1,
            eps: 0.0,
            delta_gvat: 0.0,
            rho_gccb: 2.0,
            m_ccb: 8,
            mag_cont: 0.4,
            mag_bri: 0.1,
            rho_groi: 1.5,
            m_roi: 4,
            lambda_rate: 0.5,
            zeta_groi,
            delta_xu: 1.0,
            zeta_xu: 0.5,
            beta: 0.8,
            inner: true,
            inner_exclude_self: false,
            reliability: ReliabilityKind::Entropy,
            label_reliability: ReliabilityKind::Cosine,
            frozen_bn: BnMode::Batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        n_train: usize,
        n_test: usize,
        side: usize,
        channels: usize,
        noise: f64,
        jitter: f64,
        angle_jitter: f64,
        seed: u64,
    },
    Cifar {
        variant: CifarVariant,
        train: Vec<PathBuf>,
        test: PathBuf,
    },
    Raw {
        train: PathBuf,
        test: PathBuf,
        width: usize,
        height: usize,
        channels: usize,
        classes: usize,
    },
}

impl DatasetSpec {
    pub fn synthetic(classes: usize, n_train: usize, n_test: usize, seed: u64) -> Self {
        let s = SyntheticSpec::default();
        DatasetSpec::Synthetic {
            classes,
            n_train,
            n_test,
            side: s.side,
            channels: s.channels,
            noise: s.noise,
            jitter: s.jitter,
            angle_jitter: s.angle_jitter,
            seed,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { classes, .. } | DatasetSpec::Raw { classes, .. } => *classes,
            DatasetSpec::Cifar { variant, .. } => variant.classes(),
        }
    }

    /// `(channels, height, width)`.
    pub fn geometry(&self) -> (usize, usize, usize) {
        match self {
            DatasetSpec::Synthetic { side, channels, .. } => (*channels, *side, *side),
            DatasetSpec::Cifar { .. } => (3, 32, 32),
            DatasetSpec::Raw {
                width, height, channels, ..
            } => (*channels, *height, *width),
        }
    }

    /// `(train pool, test set)`; relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<(Vec<Sample>, Vec<Sample>)> {
        match self {
            DatasetSpec::Synthetic {
                classes,
                n_train,
                n_test,
                side,
                channels,
                noise,
                jitter,
                angle_jitter,
                seed,
            } => {
                let spec = SyntheticSpec {
                    side: *side,
                    channels: *channels,
                    noise: *noise,
                    jitter: *jitter,
                    angle_jitter: *angle_jitter,
                };
                let train = dataset::make_synthetic_with(*n_train, *classes, *seed, &spec);
                let test = dataset::make_synthetic_with(*n_test, *classes, seed ^ 0x7e57_7e57_7e57_7e57, &spec);
                Ok((train, test))
            }
            DatasetSpec::Cifar { variant, train, test } => {
                let mut pool = Vec::new();
                for p in train {
                    pool.extend(dataset::load_cifar_binary(&base.join(p), *variant)?);
                }
                Ok((pool, dataset::load_cifar_binary(&base.join(test), *variant)?))
            }
            DatasetSpec::Raw {
                train,
                test,
                width,
                height,
                channels,
                classes,
            } => {
                let geom = RawGeometry {
                    width: *width,
                    height: *height,
                    channels: *channels,
                    classes: *classes,
                };
                Ok((dataset::load_raw(&base.join(train), geom)?, dataset::load_raw(&base.join(test), geom)?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    pub n_labeled: usize,
    pub flip: bool,
    pub max_shift: usize,
    pub arch: Arch,
    pub weight_norm: bool,
    pub final_bn: bool,
    #[serde(flatten)]
    pub hp: HyperParams,
    #[serde(flatten)]
    pub schedule: Schedule,
    pub recal_passes: usize,
    pub recal_batch: usize,
    /// Evaluate the test set every this many cycles (0: only at the end).
    pub eval_every: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

fn bad(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Config {
        field,
        reason: reason.into(),
    }
}

fn key_set(v: &Value) -> BTreeSet<String> {
    v.as_object().map(|o| o.keys().cloned().collect()).unwrap_or_default()
}

fn unknown_keys(given: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    let known_keys = key_set(known);
    for k in key_set(given) {
        if !known_keys.contains(&k) {
            out.push(format!("{prefix}{k}"));
        } else if k == "dataset" {
            unknown_keys(&given[&k], &known[&k], "dataset.", out);
        }
    }
}

impl RunConfig {
    pub fn flags(&self) -> ArchFlags {
        ArchFlags {
            weight_norm: self.weight_norm,
            final_bn: self.final_bn,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text)?;
        let cfg: RunConfig = serde_json::from_value(raw.clone()).map_err(|e| bad("config", e.to_string()))?;
        let mut extra = Vec::new();
        unknown_keys(&raw, &serde_json::to_value(&cfg)?, "", &mut extra);
        if !extra.is_empty() {
            return Err(bad("config", format!("unknown keys: {}", extra.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let hp = &self.hp;
        let sc = &self.schedule;
        let unit = |field: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(bad(field, format!("{v} not in [0, 1]")))
            }
        };
        let nonneg = |field: &'static str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(bad(field, format!("{v} must be a finite non-negative number")))
            }
        };
        unit("a", hp.a)?;
        unit("lambda_rate", hp.lambda_rate)?;
        unit("beta", hp.beta)?;
        if !(hp.zeta_groi > 0.5 && hp.zeta_groi <= 1.0) {
            return Err(bad("zeta_groi", format!("{} not in (0.5, 1]", hp.zeta_groi)));
        }
        if !(hp.zeta_xu > 0.0 && hp.zeta_xu < 1.0) {
            return Err(bad("zeta_xu", format!("{} not in (0, 1)", hp.zeta_xu)));
        }
        for (f, v) in [
            ("delta_gvat", hp.delta_gvat),
            ("rho_gccb", hp.rho_gccb),
            ("rho_groi", hp.rho_groi),
            ("delta_xu", hp.delta_xu),
            ("mag_cont", hp.mag_cont),
            ("mag_bri", hp.mag_bri),
            ("eps", hp.eps),
        ] {
            nonneg(f, v)?;
        }
        if hp.delta_gvat > 0.0 && hp.eps <= 0.0 {
            return Err(bad("eps", "gVAT is enabled but eps is not positive"));
        }
        if hp.mixup != MixupKind::None && !(hp.alpha > 0.0 && hp.alpha.is_finite()) {
            return Err(bad("alpha", format!("{} must be positive when mixing", hp.alpha)));
        }
        if !matches!(hp.reliability, ReliabilityKind::Entropy | ReliabilityKind::L2norm) {
            return Err(bad("reliability", "must be entropy or l2norm"));
        }
        match (hp.mixup, hp.label_reliability) {
            (_, ReliabilityKind::Entropy | ReliabilityKind::L2norm) => {
                return Err(bad("label_reliability", "must be cosine or inner"));
            }
            (MixupKind::Normal, ReliabilityKind::Inner) => {
                return Err(bad("label_reliability", "normal mixup uses the cosine kind"));
            }
            _ => {}
        }
        if sc.m_l == 0 {
            return Err(bad("m_l", "must be positive"));
        }
        if sc.m_l > sc.m_ul {
            return Err(bad("m_l", format!("m_L = {} exceeds m_UL = {}", sc.m_l, sc.m_ul)));
        }
        if !(sc.lr0 > 0.0 && sc.lr0.is_finite()) {
            return Err(bad("lr0", "must be positive"));
        }
        if sc.n_cycle == 0 || sc.n_decay >= sc.n_cycle {
            return Err(bad("n_decay", format!("need N_decay < N_cycle, got {} and {}", sc.n_decay, sc.n_cycle)));
        }
        if sc.steps_per_cycle == 0 {
            return Err(bad("steps_per_cycle", "must be positive"));
        }
        let (_, h, w) = self.dataset.geometry();
        BlockGrid::new(h, w, hp.m_ccb).map_err(|_| bad("m_ccb", format!("{h}x{w} images do not split into {0}x{0} blocks", hp.m_ccb)))?;
        BlockGrid::new(h, w, hp.m_roi).map_err(|_| bad("m_roi", format!("{h}x{w} images do not split into {0}x{0} blocks", hp.m_roi)))?;
        if self.arch == Arch::Cnn13 && (h % 4 != 0 || w % 4 != 0 || h < 12 || w < 12) {
            return Err(bad("arch", format!("cnn13 needs sides divisible by 4 and at least 12, got {h}x{w}")));
        }
        if self.arch == Arch::Tiny && (h % 2 != 0 || w % 2 != 0) {
            return Err(bad("arch", format!("tiny needs even sides, got {h}x{w}")));
        }
        let k = self.dataset.classes();
        if k < 2 {
            return Err(bad("dataset", "need at least two classes"));
        }
        if self.n_labeled == 0 {
            return Err(bad("n_labeled", "must be positive"));
        }
        if let DatasetSpec::Synthetic { n_train, n_test, .. } = self.dataset {
            if self.n_labeled > n_train {
                return Err(bad("n_labeled", format!("{} labels from a pool of {n_train}", self.n_labeled)));
            }
            if n_test == 0 {
                return Err(bad("dataset", "n_test must be positive"));
            }
        }
        if self.recal_batch == 0 {
            return Err(bad("recal_batch", "must be positive"));
        }
        Ok(())
    }

    /// Same hyperparameters on a small synthetic stand-in: tiny network,
    /// 8x8 images with the label count of the original, a short schedule.
    pub fn desk_scale(&self, steps_per_cycle: usize) -> Self {
        let k = self.dataset.classes();
        let n_labeled = (2 * k).max(8);
        let mut cfg = self.clone();
        cfg.name = format!("{}-desk", self.name);
        cfg.dataset = DatasetSpec::synthetic(k, n_labeled + 160, 64, 17);
        cfg.n_labeled = n_labeled;
        cfg.arch = Arch::Tiny;
        cfg.schedule.n_cycle = 3;
        cfg.schedule.n_decay = 1;
        cfg.schedule.steps_per_cycle = steps_per_cycle;
        cfg.schedule.m_l = 8;
        cfg.schedule.m_ul = 12;
        cfg.recal_passes = 4;
        cfg.recal_batch = 16;
        cfg.eval_every = 1;
        cfg
    }
}

pub const PRESET_NAMES: &[&str] = &[
    "svhn-250",
    "svhn-500",
    "svhn-1000",
    "cifar10-250",
    "cifar10-1000",
    "cifar10-2000",
    "cifar10-4000",
    "cifar100-10000",
    "smoke",
];

fn svhn_preset(name: &str, n_labeled: usize, a: f64, alpha: f64) -> RunConfig {
    RunConfig {
        name: name.into(),
        dataset: DatasetSpec::Raw {
            train: "data/svhn/train.mxgd".into(),
            test: "data/svhn/test.mxgd".into(),
            width: 32,
            height: 32,
            channels: 3,
            classes: 10,
        },
        n_labeled,
        flip: false,
        max_shift: 2,
        arch: Arch::Cnn13,
        weight_norm: ArchFlags::SVHN.weight_norm,
        final_bn: ArchFlags::SVHN.final_bn,
        hp: HyperParams::svhn(a, alpha),
        schedule: Schedule {
            lr0: 0.001,
            n_cycle: 120,
            n_decay: 80,
            steps_per_cycle: 400,
            m_l: 64,
            m_ul: 96,
        },
        recal_passes: RECAL_PASSES,
        recal_batch: RECAL_BATCH,
        eval_every: 10,
        seed: 0,
        out_dir: None,
    }
}

fn cifar_preset(name: &str, variant: CifarVariant, n_labeled: usize, hp: HyperParams) -> RunConfig {
    let (train, test) = match variant {
        CifarVariant::Cifar10 => (
            (1..=5).map(|i| PathBuf::from(format!("data/cifar-10-batches-bin/data_batch_{i}.bin"))).collect(),
            PathBuf::from("data/cifar-10-batches-bin/test_batch.bin"),
        ),
        CifarVariant::Cifar100 => (
            vec![PathBuf::from("data/cifar-100-binary/train.bin")],
            PathBuf::from("data/cifar-100-binary/test.bin"),
        ),
    };
    RunConfig {
        name: name.into(),
        dataset: DatasetSpec::Cifar { variant, train, test },
        n_labeled,
        flip: true,
        max_shift: 2,
        arch: Arch::Cnn13,
        weight_norm: ArchFlags::CIFAR.weight_norm,
        final_bn: ArchFlags::CIFAR.final_bn,
        hp,
        schedule: Schedule {
            lr0: 0.00047,
            n_cycle: 500,
            n_decay: 460,
            steps_per_cycle: 400,
            m_l: 96,
            m_ul: 96,
        },
        recal_passes: RECAL_PASSES,
        recal_batch: RECAL_BATCH,
        eval_every: 20,
        seed: 0,
        out_dir: None,
    }
}

/// The desk-scale synthetic experiment: two classes of heavily noised
/// bars, 40 labels, 2000 unlabeled samples, tiny network, ten cycles.
pub fn smoke_preset() -> RunConfig {
    let mut hp = HyperParams::svhn(0.5, 0.3);
    hp.eps = 1.0;
    hp.m_ccb = 4;
    hp.m_roi = 2;
    RunConfig {
        name: "smoke".into(),
        dataset: DatasetSpec::Synthetic {
            classes: 2,
            n_train: 2040,
            n_test: 1000,
            side: 8,
            channels: 3,
            noise: 2.2,
            jitter: 1.0,
            angle_jitter: 0.25,
            seed: 2024,
        },
        n_labeled: 40,
        flip: false,
        max_shift: 1,
        arch: Arch::Tiny,
        weight_norm: false,
        final_bn: true,
        hp,
        schedule: Schedule {
            lr0: 0.003,
            n_cycle: 10,
            n_decay: 6,
            steps_per_cycle: 400,
            m_l: 8,
            m_ul: 16,
        },
        recal_passes: 30,
        recal_batch: 40,
        eval_every: 1,
        seed: 0,
        out_dir: None,
    }
}

pub fn preset(name: &str) -> Result<RunConfig> {
    let c10 = CifarVariant::Cifar10;
    let cfg = match name {
        "svhn-250" => svhn_preset(name, 250, 0.1, 0.1),
        "svhn-500" => svhn_preset(name, 500, 0.5, 0.2),
        "svhn-1000" => svhn_preset(name, 1000, 0.5, 0.3),
        "cifar10-250" => cifar_preset(name, c10, 250, HyperParams::cifar(0.1, MixupKind::SelfMix, 0.8)),
        "cifar10-1000" => cifar_preset(name, c10, 1000, HyperParams::cifar(0.2, MixupKind::Normal, 0.75)),
        "cifar10-2000" => cifar_preset(name, c10, 2000, HyperParams::cifar(0.35, MixupKind::Normal, 0.8)),
        "cifar10-4000" => cifar_preset(name, c10, 4000, HyperParams::cifar(0.4, MixupKind::Normal, 0.8)),
        "cifar100-10000" => {
            let mut hp = HyperParams::cifar(0.2, MixupKind::SelfMix, 0.8);
            hp.mag_bri = 0.2;
            hp.beta = 0.5;
            cifar_preset(name, CifarVariant::Cifar100, 10000, hp)
        }
        "smoke" => smoke_preset(),
        _ => {
            return Err(bad(
                "preset",
                format!("unknown preset {name:?}; available: {}", PRESET_NAMES.join(", ")),
            ))
        }
    };
    Ok(cfg)
}
