//! Distortion sampling and application.
//!
//! A [`DistortionChain`] is drawn per clean clip from the training
//! distribution below and applied in a fixed physical order: room
//! reverberation, then additive noise, then channel bandlimiting, then
//! packet loss.
//!
//! | kind        | inclusion | parameters                                   |
//! |-------------|-----------|----------------------------------------------|
//! | white noise | 0.3       | SNR uniform in [0, 25] dB                    |
//! | noise       | 0.7       | SNR uniform in [-5, 20] dB, recorded asset   |
//! | reverb      | 0.5       | recorded RIR                                 |
//! | downsample  | 0.5       | rate from {2, 4, 6, 8, 16} kHz               |
//! | packet loss | 0.3       | packets of 50..200 ms, p_drop in [0.02, 0.2] |

mod assets;
mod batch;
mod ops;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use assets::{AssetCatalog, AssetKind, AssetRecord, AssetStore};
pub use batch::{degrade_dir, read_provenance, write_provenance, ProvenanceRecord, PROVENANCE_FILE};
pub use ops::{
    apply_chain, apply_downsample, apply_noise, apply_packet_loss, apply_reverb,
    apply_white_noise, packet_loss_mask, NoiseMix,
};

use crate::error::{Error, Result};
use crate::util::rng_from_seed;

pub const WHITE_NOISE_SNR_DB: (f64, f64) = (0.0, 25.0);
pub const NOISE_SNR_DB: (f64, f64) = (-5.0, 20.0);
pub const DOWNSAMPLE_RATES_HZ: [u32; 5] = [2000, 4000, 6000, 8000, 16000];
pub const PACKET_MS_RANGE: [f64; 2] = [50.0, 200.0];
pub const P_DROP_RANGE: (f64, f64) = (0.02, 0.2);

/// Distortion kinds in canonical application order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Reverb,
    Noise,
    WhiteNoise,
    Downsample,
    PacketLoss,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 5] = [
        DistortionKind::Reverb,
        DistortionKind::Noise,
        DistortionKind::WhiteNoise,
        DistortionKind::Downsample,
        DistortionKind::PacketLoss,
    ];

    pub fn inclusion_probability(self) -> f64 {
        match self {
            DistortionKind::WhiteNoise => 0.3,
            DistortionKind::Noise => 0.7,
            DistortionKind::Reverb => 0.5,
            DistortionKind::Downsample => 0.5,
            DistortionKind::PacketLoss => 0.3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::WhiteNoise => "white_noise",
            DistortionKind::Noise => "noise",
            DistortionKind::Reverb => "reverb",
            DistortionKind::Downsample => "downsample",
            DistortionKind::PacketLoss => "packet_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Bit of this kind inside a [`TaskLabel`].
    pub fn bit(self) -> u8 {
        match self {
            DistortionKind::WhiteNoise => 1,
            DistortionKind::Noise => 2,
            DistortionKind::Reverb => 4,
            DistortionKind::Downsample => 8,
            DistortionKind::PacketLoss => 16,
        }
    }
}

/// Set of distortion kinds present in a record, stored as a bitmask byte.
/// Single-kind labels identify the per-task fine-tuning datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct TaskLabel(pub u8);

impl TaskLabel {
    pub fn single(kind: DistortionKind) -> Self {
        TaskLabel(kind.bit())
    }

    pub fn kinds(self) -> Vec<DistortionKind> {
        DistortionKind::ALL
            .into_iter()
            .filter(|k| self.0 & k.bit() != 0)
            .collect()
    }

    pub fn contains(self, kind: DistortionKind) -> bool {
        self.0 & kind.bit() != 0
    }

    pub fn single_kind(self) -> Option<DistortionKind> {
        match self.kinds().as_slice() {
            [k] => Some(*k),
            _ => None,
        }
    }

    /// `"noise"`, `"reverb+noise"`, ... or `"clean"` for the empty set.
    pub fn name(self) -> String {
        let names: Vec<_> = self.kinds().iter().map(|k| k.name()).collect();
        if names.is_empty() {
            "clean".into()
        } else {
            names.join("+")
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "clean" {
            return Some(TaskLabel(0));
        }
        s.split('+')
            .map(DistortionKind::from_name)
            .try_fold(0u8, |acc, k| k.map(|k| acc | k.bit()))
            .map(TaskLabel)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistortionSpec {
    Reverb {
        source_ref: String,
    },
    Noise {
        snr_db: f64,
        source_ref: String,
    },
    WhiteNoise {
        snr_db: f64,
    },
    Downsample {
        target_sr_hz: u32,
    },
    PacketLoss {
        packet_ms_range: [f64; 2],
        p_drop: f64,
    },
}

impl DistortionSpec {
    pub fn kind(&self) -> DistortionKind {
        match self {
            DistortionSpec::WhiteNoise { .. } => DistortionKind::WhiteNoise,
            DistortionSpec::Noise { .. } => DistortionKind::Noise,
            DistortionSpec::Reverb { .. } => DistortionKind::Reverb,
            DistortionSpec::Downsample { .. } => DistortionKind::Downsample,
            DistortionSpec::PacketLoss { .. } => DistortionKind::PacketLoss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        match *self {
            DistortionSpec::WhiteNoise { snr_db } => {
                if !(WHITE_NOISE_SNR_DB.0..=WHITE_NOISE_SNR_DB.1).contains(&snr_db) {
                    return bad(format!("white noise SNR {snr_db} dB outside [0, 25]"));
                }
            }
            DistortionSpec::Noise { snr_db, .. } => {
                if !(NOISE_SNR_DB.0..=NOISE_SNR_DB.1).contains(&snr_db) {
                    return bad(format!("noise SNR {snr_db} dB outside [-5, 20]"));
                }
            }
            DistortionSpec::Reverb { .. } => {}
            DistortionSpec::Downsample { target_sr_hz } => {
                if !DOWNSAMPLE_RATES_HZ.contains(&target_sr_hz) {
                    return bad(format!("downsample rate {target_sr_hz} not in the table"));
                }
            }
            DistortionSpec::PacketLoss {
                packet_ms_range: [lo, hi],
                p_drop,
            } => {
                if !(P_DROP_RANGE.0..=P_DROP_RANGE.1).contains(&p_drop) {
                    return bad(format!("p_drop {p_drop} outside [0.02, 0.2]"));
                }
                if !(PACKET_MS_RANGE[0] <= lo && lo <= hi && hi <= PACKET_MS_RANGE[1]) {
                    return bad(format!("packet range [{lo}, {hi}] ms outside [50, 200]"));
                }
            }
        }
        Ok(())
    }
}

/// Ordered distortions applied to one clean clip, with the seed that drives
/// every random choice made while applying them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionChain {
    pub specs: Vec<DistortionSpec>,
    pub seed: u64,
}

impl DistortionChain {
    pub fn validate(&self) -> Result<()> {
        if self.specs.is_empty() {
            return Err(Error::InvalidSpec("chain has no distortions".into()));
        }
        for pair in self.specs.windows(2) {
            if pair[0].kind() >= pair[1].kind() {
                return Err(Error::InvalidSpec(format!(
                    "{} may not follow {}",
                    pair[1].kind().name(),
                    pair[0].kind().name()
                )));
            }
        }
        self.specs.iter().try_for_each(DistortionSpec::validate)
    }

    pub fn label(&self) -> TaskLabel {
        TaskLabel(self.specs.iter().fold(0, |m, s| m | s.kind().bit()))
    }

    pub fn contains(&self, kind: DistortionKind) -> bool {
        self.specs.iter().any(|s| s.kind() == kind)
    }
}

/// One raw inclusion draw: every kind is an independent Bernoulli trial.
/// The result may be empty.
pub fn draw_inclusions(rng: &mut impl Rng) -> Vec<DistortionKind> {
    DistortionKind::ALL
        .into_iter()
        .filter(|k| rng.gen_bool(k.inclusion_probability()))
        .collect()
}

/// Raw draws repeated until one is non-empty.
pub fn sample_inclusions(rng: &mut impl Rng) -> Vec<DistortionKind> {
    loop {
        let picked = draw_inclusions(rng);
        if !picked.is_empty() {
            return picked;
        }
    }
}

fn sample_spec(kind: DistortionKind, rng: &mut impl Rng, catalog: &AssetCatalog) -> Result<DistortionSpec> {
    let pick = |rng: &mut dyn rand::RngCore, list: &[AssetRecord], what: &str| -> Result<String> {
        if list.is_empty() {
            return Err(Error::Asset(format!("{what} catalog is empty")));
        }
        Ok(list[rng.gen_range(0..list.len())].path.clone())
    };
    Ok(match kind {
        DistortionKind::Reverb => DistortionSpec::Reverb {
            source_ref: pick(rng, &catalog.rir, "RIR")?,
        },
        DistortionKind::Noise => {
            let source_ref = pick(rng, &catalog.noise, "noise")?;
            DistortionSpec::Noise {
                snr_db: rng.gen_range(NOISE_SNR_DB.0..=NOISE_SNR_DB.1),
                source_ref,
            }
        }
        DistortionKind::WhiteNoise => DistortionSpec::WhiteNoise {
            snr_db: rng.gen_range(WHITE_NOISE_SNR_DB.0..=WHITE_NOISE_SNR_DB.1),
        },
        DistortionKind::Downsample => DistortionSpec::Downsample {
            target_sr_hz: DOWNSAMPLE_RATES_HZ[rng.gen_range(0..DOWNSAMPLE_RATES_HZ.len())],
        },
        DistortionKind::PacketLoss => DistortionSpec::PacketLoss {
            packet_ms_range: PACKET_MS_RANGE,
            p_drop: rng.gen_range(P_DROP_RANGE.0..=P_DROP_RANGE.1),
        },
    })
}

/// Draws a chain from the training distribution. Each kind is included
/// independently with its table probability; an empty draw is rejected and
/// redrawn.
pub fn sample_chain(rng_seed: u64, catalog: &AssetCatalog) -> Result<DistortionChain> {
    let mut rng = rng_from_seed(rng_seed);
    let kinds = sample_inclusions(&mut rng);
    let specs = kinds
        .into_iter()
        .map(|k| sample_spec(k, &mut rng, catalog))
        .collect::<Result<_>>()?;
    Ok(DistortionChain {
        specs,
        seed: rng.gen(),
    })
}

/// A chain containing exactly one distortion of the given kind, with its
/// hyperparameters drawn from the table ranges.
pub fn sample_single(kind: DistortionKind, rng_seed: u64, catalog: &AssetCatalog) -> Result<DistortionChain> {
    let mut rng = rng_from_seed(rng_seed);
    let spec = sample_spec(kind, &mut rng, catalog)?;
    Ok(DistortionChain {
        specs: vec![spec],
        seed: rng.gen(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn catalog() -> AssetCatalog {
        AssetCatalog::from_records([
            AssetRecord {
                path: "n0".into(),
                kind: AssetKind::Noise,
                duration_s: 1.0,
            },
            AssetRecord {
                path: "n1".into(),
                kind: AssetKind::Noise,
                duration_s: 1.0,
            },
            AssetRecord {
                path: "r0".into(),
                kind: AssetKind::Rir,
                duration_s: 0.2,
            },
        ])
    }

    #[test]
    fn sampler_is_deterministic_and_valid() {
        let cat = catalog();
        for seed in 0..500 {
            let a = sample_chain(seed, &cat).unwrap();
            assert_eq!(a, sample_chain(seed, &cat).unwrap());
            a.validate().unwrap();
        }
    }

    #[test]
    fn white_noise_snr_in_range() {
        let cat = catalog();
        let mut seen = 0;
        for seed in 0..5000 {
            for s in sample_chain(seed, &cat).unwrap().specs {
                if let DistortionSpec::WhiteNoise { snr_db } = s {
                    assert!((0.0..=25.0).contains(&snr_db));
                    seen += 1;
                }
            }
        }
        assert!(seen > 1000);
    }

    #[test]
    fn empty_catalog_only_fails_when_needed() {
        let empty = AssetCatalog::default();
        let mut ok = 0;
        let mut failed = 0;
        for seed in 0..200 {
            match sample_chain(seed, &empty) {
                Ok(c) => {
                    assert!(!c.contains(DistortionKind::Noise) && !c.contains(DistortionKind::Reverb));
                    ok += 1;
                }
                Err(Error::Asset(_)) => failed += 1,
                Err(e) => panic!("{e}"),
            }
        }
        assert!(ok > 0 && failed > 0);
    }

    #[test]
    fn raw_draw_rate_matches_table() {
        let mut rng = rng_from_seed(12);
        let n = 20_000;
        let hits = (0..n)
            .filter(|_| draw_inclusions(&mut rng).contains(&DistortionKind::Noise))
            .count();
        assert!(((hits as f64 / n as f64) - 0.7).abs() < 0.015);
    }

    #[test]
    fn inclusion_rate_of_noise() {
        let mut rng = rng_from_seed(11);
        let n = 20_000;
        let hits = (0..n)
            .filter(|_| sample_inclusions(&mut rng).contains(&DistortionKind::Noise))
            .count();
        // Conditioning on a non-empty draw lifts 0.7 to 0.7 / (1 - P(empty)).
        let p_empty: f64 = DistortionKind::ALL.iter().map(|k| 1.0 - k.inclusion_probability()).product();
        let expected = 0.7 / (1.0 - p_empty);
        assert!(((hits as f64 / n as f64) - expected).abs() < 0.015);
    }

    #[test]
    fn chain_order_enforced() {
        let c = DistortionChain {
            specs: vec![
                DistortionSpec::Downsample { target_sr_hz: 8000 },
                DistortionSpec::WhiteNoise { snr_db: 3.0 },
            ],
            seed: 0,
        };
        assert!(c.validate().is_err());
        assert!(DistortionChain { specs: vec![], seed: 0 }.validate().is_err());
    }

    #[test]
    fn spec_ranges_enforced() {
        assert!(DistortionSpec::WhiteNoise { snr_db: -1.0 }.validate().is_err());
        assert!(DistortionSpec::Noise { snr_db: -5.0, source_ref: "n".into() }.validate().is_ok());
        assert!(DistortionSpec::Downsample { target_sr_hz: 11025 }.validate().is_err());
        assert!(DistortionSpec::PacketLoss { packet_ms_range: [50.0, 200.0], p_drop: 0.5 }.validate().is_err());
    }

    #[test]
    fn labels_roundtrip_names() {
        let l = TaskLabel(DistortionKind::Noise.bit() | DistortionKind::Reverb.bit());
        assert_eq!(l.name(), "reverb+noise");
        assert_eq!(TaskLabel::parse(&l.name()), Some(l));
        assert_eq!(TaskLabel::parse("clean"), Some(TaskLabel(0)));
        assert_eq!(TaskLabel::single(DistortionKind::PacketLoss).single_kind(), Some(DistortionKind::PacketLoss));
        assert_eq!(TaskLabel::parse("bogus"), None);
    }

    #[test]
    fn spec_json_shape() {
        let s = DistortionSpec::Noise { snr_db: 1.5, source_ref: "a.wav".into() };
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"kind":"noise","snr_db":1.5,"source_ref":"a.wav"}"#);
    }
}
