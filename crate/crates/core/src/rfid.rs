//! Simulated reader/tag air interface.
//!
//! A read either finds no tag (absent, damaged, or on a band the reader does
//! not cover) or returns the tag code passed through a binary symmetric
//! channel. Corruption is caught with probability `detect_probability`;
//! otherwise the wrong code is returned as if it were good.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exec::Execution;
use crate::model::{Disc, DriveConfig, FrequencyBand, TagCode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReadResult {
    Ok(TagCode),
    NoTagDetected,
    ReadCorrupt,
}

impl ReadResult {
    pub fn code(&self) -> Option<&TagCode> {
        match self {
            ReadResult::Ok(c) => Some(c),
            _ => None,
        }
    }
}

/// Seeded noise source for tag reads.
#[derive(Debug, Clone)]
pub struct ReadChannel {
    rng: ChaCha8Rng,
    bit_error_rate: f64,
    detect_probability: f64,
}

impl ReadChannel {
    pub fn new(seed: u64, bit_error_rate: f64, detect_probability: f64) -> Self {
        ReadChannel {
            rng: ChaCha8Rng::seed_from_u64(seed),
            bit_error_rate,
            detect_probability,
        }
    }

    pub fn from_config(seed: u64, cfg: &DriveConfig) -> Self {
        Self::new(seed, cfg.bit_error_rate, cfg.detect_probability)
    }

    /// Independent channel number `stream` under the same seed.
    pub fn stream(seed: u64, stream: u64, cfg: &DriveConfig) -> Self {
        let mut chan = Self::from_config(seed, cfg);
        chan.rng.set_stream(stream);
        chan
    }

    fn transmit(&mut self, code: &TagCode) -> ReadResult {
        if self.bit_error_rate <= 0.0 {
            return ReadResult::Ok(code.clone());
        }
        let mut received = code.clone();
        let mut flipped = false;
        for i in 0..code.width() {
            if self.rng.random::<f64>() < self.bit_error_rate {
                received = received.with_bit_flipped(i);
                flipped = true;
            }
        }
        if flipped && self.rng.random::<f64>() < self.detect_probability {
            ReadResult::ReadCorrupt
        } else {
            ReadResult::Ok(received)
        }
    }
}

pub fn band_compatible(reader_bands: &BTreeSet<FrequencyBand>, tag_band: FrequencyBand) -> bool {
    reader_bands.contains(&tag_band)
}

/// One read attempt of the tag on `disc`.
pub fn read_tag(disc: &Disc, cfg: &DriveConfig, chan: &mut ReadChannel) -> ReadResult {
    match &disc.tag {
        Some(tag) if !tag.is_damaged() && band_compatible(&cfg.reader_bands, tag.band()) => {
            chan.transmit(tag.code())
        }
        _ => ReadResult::NoTagDetected,
    }
}

/// Outcome counts over a batch of independent reads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReadTally {
    pub exact: u64,
    /// `Ok` with a code that differs from the tag's.
    pub undetected_corrupt: u64,
    pub detected_corrupt: u64,
    pub no_tag: u64,
}

impl ReadTally {
    pub fn total(&self) -> u64 {
        self.exact + self.undetected_corrupt + self.detected_corrupt + self.no_tag
    }

    /// Reads in which at least one bit was flipped.
    pub fn corrupted(&self) -> u64 {
        self.undetected_corrupt + self.detected_corrupt
    }

    fn add(mut self, other: ReadTally) -> ReadTally {
        self.exact += other.exact;
        self.undetected_corrupt += other.undetected_corrupt;
        self.detected_corrupt += other.detected_corrupt;
        self.no_tag += other.no_tag;
        self
    }
}

/// Runs `reads` independent reads of `disc`, read `i` on stream `i` of `seed`.
pub fn survey(disc: &Disc, cfg: &DriveConfig, seed: u64, reads: u64, exec: Execution) -> ReadTally {
    let truth = disc.tag.as_ref().map(|t| t.code());
    exec.map_range(reads, |i| {
        let mut chan = ReadChannel::stream(seed, i, cfg);
        let mut t = ReadTally::default();
        match read_tag(disc, cfg, &mut chan) {
            ReadResult::Ok(c) if Some(&c) == truth => t.exact += 1,
            ReadResult::Ok(_) => t.undetected_corrupt += 1,
            ReadResult::ReadCorrupt => t.detected_corrupt += 1,
            ReadResult::NoTagDetected => t.no_tag += 1,
        }
        t
    })
    .into_iter()
    .fold(ReadTally::default(), ReadTally::add)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RfidTag, VisibleSerial};

    fn disc_with(code: &str, band: FrequencyBand) -> Disc {
        Disc::tagged(
            VisibleSerial::new("TD-TEST").unwrap(),
            RfidTag::new(TagCode::parse_any(code).unwrap(), band),
        )
    }

    #[test]
    fn band_rules() {
        use FrequencyBand::*;
        assert!(band_compatible(&BTreeSet::from([Hf13_56MHz]), Hf13_56MHz));
        assert!(!band_compatible(&BTreeSet::from([Lf125kHz]), Uhf860_960MHz));
        let all: BTreeSet<_> = FrequencyBand::ALL.into_iter().collect();
        for b in FrequencyBand::ALL {
            assert!(band_compatible(&all, b));
        }
    }

    #[test]
    fn noiseless_read_returns_code() {
        let disc = disc_with("0b1010", FrequencyBand::Hf13_56MHz);
        let cfg = DriveConfig::default();
        let mut chan = ReadChannel::from_config(1, &cfg);
        for _ in 0..10 {
            assert_eq!(
                read_tag(&disc, &cfg, &mut chan),
                ReadResult::Ok(TagCode::parse_any("0b1010").unwrap())
            );
        }
    }

    #[test]
    fn no_tag_cases() {
        let cfg = DriveConfig::default();
        let mut chan = ReadChannel::from_config(1, &cfg);
        let untagged = Disc::untagged(VisibleSerial::new("TD-COPY").unwrap());
        assert_eq!(
            read_tag(&untagged, &cfg, &mut chan),
            ReadResult::NoTagDetected
        );

        let mut damaged = disc_with("0b1010", FrequencyBand::Hf13_56MHz);
        damaged.tag = damaged.tag.map(RfidTag::damaged);
        assert_eq!(
            read_tag(&damaged, &cfg, &mut chan),
            ReadResult::NoTagDetected
        );

        let wrong_band = disc_with("0b1010", FrequencyBand::Uhf860_960MHz);
        for seed in 0..100 {
            let mut chan = ReadChannel::from_config(seed, &cfg);
            assert_eq!(
                read_tag(&wrong_band, &cfg, &mut chan),
                ReadResult::NoTagDetected
            );
        }
        let multi = DriveConfig::multimode();
        assert!(read_tag(&wrong_band, &multi, &mut chan).code().is_some());
    }

    #[test]
    fn full_noise_always_detected() {
        let disc = disc_with("deadbeef0011223344556677", FrequencyBand::Hf13_56MHz);
        let cfg = DriveConfig {
            bit_error_rate: 1.0,
            detect_probability: 1.0,
            ..Default::default()
        };
        let tally = survey(&disc, &cfg, 3, 1000, Execution::default());
        assert_eq!(tally.detected_corrupt, 1000);
    }

    #[test]
    fn undetected_corruption_yields_wrong_code() {
        let disc = disc_with("0b1010", FrequencyBand::Hf13_56MHz);
        let cfg = DriveConfig {
            bit_error_rate: 1.0,
            detect_probability: 0.0,
            ..Default::default()
        };
        let mut chan = ReadChannel::from_config(9, &cfg);
        // every bit flips
        assert_eq!(
            read_tag(&disc, &cfg, &mut chan),
            ReadResult::Ok(TagCode::parse_any("0b0101").unwrap())
        );
    }

    #[test]
    fn reads_are_reproducible() {
        let disc = disc_with("deadbeef0011223344556677", FrequencyBand::Hf13_56MHz);
        let cfg = DriveConfig {
            bit_error_rate: 0.02,
            ..Default::default()
        };
        let run = |seed| {
            let mut chan = ReadChannel::from_config(seed, &cfg);
            (0..50)
                .map(|_| read_tag(&disc, &cfg, &mut chan))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
        assert_eq!(
            survey(&disc, &cfg, 5, 2000, Execution::Sequential),
            survey(&disc, &cfg, 5, 2000, Execution::default())
        );
    }

    /// Corrupted-read fraction at ber = 0.01 over a 96-bit tag matches the
    /// binomial probability of at least one flip, within 3 sigma.
    #[test]
    fn corruption_rate_matches_binomial() {
        let disc = disc_with("deadbeef0011223344556677", FrequencyBand::Hf13_56MHz);
        let cfg = DriveConfig {
            bit_error_rate: 0.01,
            ..Default::default()
        };
        let n = 100_000u64;
        let tally = survey(&disc, &cfg, 2024, n, Execution::default());
        assert_eq!(tally.total(), n);

        // P(no flip) as a product of per-bit survival probabilities.
        let p_clean = (0..96).fold(1.0f64, |acc, _| acc * (1.0 - 0.01));
        let p = 1.0 - p_clean;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let observed = tally.corrupted() as f64 / n as f64;
        assert!(
            (observed - p).abs() <= 3.0 * sigma,
            "observed {observed}, expected {p} ± {}",
            3.0 * sigma
        );

        // detection split: roughly 90% of corrupted reads are flagged
        let detected = tally.detected_corrupt as f64 / tally.corrupted() as f64;
        assert!((detected - 0.9).abs() < 0.01, "{detected}");
    }
}
