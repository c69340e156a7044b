//! Domain types shared by the reader, controller, activation and content modules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::content::SealedImage;

/// Default tag code width (EPC-scale).
pub const DEFAULT_CODE_WIDTH: u32 = 96;
/// Largest code width accepted anywhere in the toolchain.
pub const MAX_CODE_WIDTH: u32 = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("code width mismatch: expected {expected} bits, got {found}")]
    WidthMismatch { expected: u32, found: u32 },
    #[error("malformed code text: {0}")]
    MalformedText(String),
    #[error("invalid code width {0} (must be 1..={max})", max = MAX_CODE_WIDTH)]
    InvalidWidth(u32),
    #[error("invalid visible serial {0:?}")]
    InvalidSerial(String),
    #[error("invalid drive config: {0}")]
    InvalidConfig(String),
}

fn check_width(width: u32) -> Result<(), ModelError> {
    if width == 0 || width > MAX_CODE_WIDTH {
        return Err(ModelError::InvalidWidth(width));
    }
    Ok(())
}

/// Number of bytes used to carry a code of `width` bits.
pub fn code_byte_len(width: u32) -> usize {
    width.div_ceil(8) as usize
}

/// The hidden code stored in a disc's RFID tag.
///
/// Bits are held big-endian and right-aligned in `ceil(width / 8)` bytes, so
/// a 4-bit code `1010` is the single byte `0x0a`. Unused leading bits are
/// always zero. Bit index 0 is the most significant bit, i.e. the first
/// character of the `0b` text form.
///
/// The derived `Eq`/`Ord` are structural and only used for collections; code
/// comparisons that cross a width boundary go through [`TagCode::try_eq`].
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TagCode {
    width: u32,
    bytes: Box<[u8]>,
}

impl TagCode {
    /// Builds a code from its byte encoding. Pad bits must be zero.
    pub fn from_bytes(width: u32, bytes: &[u8]) -> Result<Self, ModelError> {
        check_width(width)?;
        if bytes.len() != code_byte_len(width) {
            return Err(ModelError::WidthMismatch {
                expected: width,
                found: (bytes.len() * 8) as u32,
            });
        }
        let pad = code_byte_len(width) as u32 * 8 - width;
        if pad > 0 && bytes[0] >> (8 - pad) != 0 {
            return Err(ModelError::WidthMismatch {
                expected: width,
                found: code_byte_len(width) as u32 * 8,
            });
        }
        Ok(TagCode {
            width,
            bytes: bytes.into(),
        })
    }

    /// Builds a code from the low `width` bits of `value`.
    pub fn from_u64(width: u32, value: u64) -> Result<Self, ModelError> {
        if width > 64 || (width < 64 && value >> width != 0) {
            check_width(width)?;
            return Err(ModelError::WidthMismatch {
                expected: width,
                found: 64 - value.leading_zeros(),
            });
        }
        let n = code_byte_len(width);
        Self::from_bytes(width, &value.to_be_bytes()[8 - n..])
    }

    pub fn zero(width: u32) -> Result<Self, ModelError> {
        check_width(width)?;
        Ok(TagCode {
            width,
            bytes: vec![0u8; code_byte_len(width)].into(),
        })
    }

    /// Draws a uniformly random code.
    pub fn random<R: RngCore + ?Sized>(width: u32, rng: &mut R) -> Result<Self, ModelError> {
        check_width(width)?;
        let mut bytes = vec![0u8; code_byte_len(width)];
        rng.fill_bytes(&mut bytes);
        let pad = bytes.len() as u32 * 8 - width;
        if pad > 0 {
            bytes[0] &= 0xff >> pad;
        }
        Ok(TagCode {
            width,
            bytes: bytes.into(),
        })
    }

    /// Parses canonical text at a fixed width. At a known width the two
    /// text forms cannot be confused: a hex string of a byte-aligned code is
    /// `width / 4` characters long, a bit string `width + 2`. A bare string
    /// of exactly `width` binary digits is also read as bits.
    pub fn parse(text: &str, width: u32) -> Result<Self, ModelError> {
        check_width(width)?;
        let code = if width.is_multiple_of(8) && text.len() as u32 == width / 4 {
            Self::parse_hex(text)?
        } else if text.len() as u32 == width && text.bytes().all(|b| b == b'0' || b == b'1') {
            Self::parse_bits(text, text)?
        } else if let Some(bits) = text.strip_prefix("0b") {
            Self::parse_bits(text, bits)?
        } else {
            Self::parse_hex(text)?
        };
        if code.width != width {
            return Err(ModelError::WidthMismatch {
                expected: width,
                found: code.width,
            });
        }
        Ok(code)
    }

    /// Parses text, taking the width from the text itself.
    ///
    /// Without a width the canonical forms overlap: `0b1010` is both a 4-bit
    /// bit string and 24-bit hex. A `0b` string is read as bits when all its
    /// digits are binary and their count is not a multiple of 8 (the only
    /// case in which the bit form is canonical); anything else is hex.
    pub fn parse_any(text: &str) -> Result<Self, ModelError> {
        if let Some(bits) = text.strip_prefix("0b") {
            let binary = !bits.is_empty() && bits.bytes().all(|b| b == b'0' || b == b'1');
            if (binary && bits.len() % 8 != 0) || !text.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Self::parse_bits(text, bits);
            }
        }
        Self::parse_hex(text)
    }

    fn parse_bits(text: &str, bits: &str) -> Result<Self, ModelError> {
        if bits.is_empty() {
            return Err(ModelError::MalformedText(text.to_owned()));
        }
        let width = u32::try_from(bits.len()).unwrap_or(u32::MAX);
        check_width(width)?;
        let mut code = Self::zero(width)?;
        for (i, c) in bits.chars().enumerate() {
            match c {
                '0' => {}
                '1' => code.set_bit(i as u32),
                _ => return Err(ModelError::MalformedText(text.to_owned())),
            }
        }
        Ok(code)
    }

    fn parse_hex(text: &str) -> Result<Self, ModelError> {
        if text.is_empty() || !text.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(ModelError::MalformedText(text.to_owned()));
        }
        let width = u32::try_from(text.len())
            .unwrap_or(u32::MAX)
            .saturating_mul(4);
        check_width(width)?;
        let mut code = Self::zero(width)?;
        for (i, c) in text.chars().enumerate() {
            let nibble = c.to_digit(16).expect("checked hex digit");
            for k in 0..4 {
                if nibble & (0b1000 >> k) != 0 {
                    code.set_bit(i as u32 * 4 + k);
                }
            }
        }
        Ok(code)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn locate(&self, index: u32) -> (usize, u8) {
        assert!(
            index < self.width,
            "bit {index} out of range for width {}",
            self.width
        );
        let g = self.bytes.len() as u32 * 8 - self.width + index;
        ((g / 8) as usize, 0x80 >> (g % 8))
    }

    pub fn bit(&self, index: u32) -> bool {
        let (byte, mask) = self.locate(index);
        self.bytes[byte] & mask != 0
    }

    fn set_bit(&mut self, index: u32) {
        let (byte, mask) = self.locate(index);
        self.bytes[byte] |= mask;
    }

    /// Copy of this code with bit `index` inverted.
    pub fn with_bit_flipped(&self, index: u32) -> Self {
        let mut out = self.clone();
        let (byte, mask) = out.locate(index);
        out.bytes[byte] ^= mask;
        out
    }

    /// Equality that refuses to compare codes of different widths.
    pub fn try_eq(&self, other: &TagCode) -> Result<bool, ModelError> {
        if self.width != other.width {
            return Err(ModelError::WidthMismatch {
                expected: self.width,
                found: other.width,
            });
        }
        Ok(self.bytes == other.bytes)
    }

    /// Canonical text: lowercase hex when the width is a whole number of
    /// bytes, otherwise a `0b` bit string.
    pub fn canonical(&self) -> String {
        if self.width.is_multiple_of(8) {
            self.bytes.iter().map(|b| format!("{b:02x}")).collect()
        } else {
            let mut s = String::with_capacity(self.width as usize + 2);
            s.push_str("0b");
            for i in 0..self.width {
                s.push(if self.bit(i) { '1' } else { '0' });
            }
            s
        }
    }
}

impl fmt::Display for TagCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl fmt::Debug for TagCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TagCode({})", self.canonical())
    }
}

impl FromStr for TagCode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_any(s)
    }
}

impl Serialize for TagCode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.canonical())
    }
}

impl<'de> Deserialize<'de> for TagCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        TagCode::parse_any(&text).map_err(serde::de::Error::custom)
    }
}

/// Human-readable serial printed on the disc.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct VisibleSerial(String);

impl VisibleSerial {
    pub fn new(text: impl Into<String>) -> Result<Self, ModelError> {
        let text = text.into();
        let ok = (4..=64).contains(&text.len())
            && text
                .bytes()
                .all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'-');
        if ok {
            Ok(VisibleSerial(text))
        } else {
            Err(ModelError::InvalidSerial(text))
        }
    }

    /// Fresh serial of the form `TD-XXXX-XXXX-XXXX`.
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
        let mut s = String::from("TD");
        for _ in 0..3 {
            s.push('-');
            for _ in 0..4 {
                let i = (rng.next_u32() as usize) % ALPHABET.len();
                s.push(ALPHABET[i] as char);
            }
        }
        VisibleSerial(s)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for VisibleSerial {
    type Error = ModelError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<VisibleSerial> for String {
    fn from(value: VisibleSerial) -> Self {
        value.0
    }
}

impl fmt::Display for VisibleSerial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for VisibleSerial {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrequencyBand {
    #[serde(rename = "LF_125kHz")]
    Lf125kHz,
    #[serde(rename = "HF_13_56MHz")]
    Hf13_56MHz,
    #[serde(rename = "UHF_860_960MHz")]
    Uhf860_960MHz,
    #[serde(rename = "MW_2_4GHz")]
    Mw2_4GHz,
}

impl FrequencyBand {
    pub const ALL: [FrequencyBand; 4] = [
        FrequencyBand::Lf125kHz,
        FrequencyBand::Hf13_56MHz,
        FrequencyBand::Uhf860_960MHz,
        FrequencyBand::Mw2_4GHz,
    ];
}

/// Passive read-only tag. The code cannot change after minting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfidTag {
    code: TagCode,
    band: FrequencyBand,
    #[serde(default)]
    damaged: bool,
}

impl RfidTag {
    pub fn new(code: TagCode, band: FrequencyBand) -> Self {
        RfidTag {
            code,
            band,
            damaged: false,
        }
    }

    /// Same tag, marked unreadable.
    pub fn damaged(mut self) -> Self {
        self.damaged = true;
        self
    }

    pub fn code(&self) -> &TagCode {
        &self.code
    }

    pub fn band(&self) -> FrequencyBand {
        self.band
    }

    pub fn is_damaged(&self) -> bool {
        self.damaged
    }
}

/// A disc as seen by the drive. `tag: None` models ordinary copied media;
/// `content: None` is a disc described without an image (simulation only).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Disc {
    pub serial: VisibleSerial,
    pub tag: Option<RfidTag>,
    pub content: Option<SealedImage>,
    pub title: String,
}

impl Disc {
    pub fn tagged(serial: VisibleSerial, tag: RfidTag) -> Self {
        Disc {
            serial,
            tag: Some(tag),
            content: None,
            title: String::new(),
        }
    }

    pub fn untagged(serial: VisibleSerial) -> Self {
        Disc {
            serial,
            tag: None,
            content: None,
            title: String::new(),
        }
    }

    pub fn with_content(mut self, content: SealedImage) -> Self {
        self.content = Some(content);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivationSource {
    LocalProvision,
    RemoteActivation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub serial: VisibleSerial,
    pub activated_at: DateTime<Utc>,
    pub source: ActivationSource,
}

impl ActivationRecord {
    /// Record stamped at `at`, truncated to whole seconds.
    pub fn new(serial: VisibleSerial, at: DateTime<Utc>, source: ActivationSource) -> Self {
        ActivationRecord {
            serial,
            activated_at: truncate_to_seconds(at),
            source,
        }
    }
}

pub(crate) fn truncate_to_seconds(at: DateTime<Utc>) -> DateTime<Utc> {
    DateTime::from_timestamp(at.timestamp(), 0).expect("in-range timestamp")
}

/// The host-side set of authorized tag codes.
///
/// Every code in one database has the same width. Re-inserting a code keeps
/// the original record. New records are stamped no earlier than the latest
/// record already present, so the activation history is monotone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeDatabase {
    width: u32,
    entries: BTreeMap<TagCode, ActivationRecord>,
}

impl CodeDatabase {
    pub fn new(width: u32) -> Result<Self, ModelError> {
        check_width(width)?;
        Ok(CodeDatabase {
            width,
            entries: BTreeMap::new(),
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check(&self, code: &TagCode) -> Result<(), ModelError> {
        if code.width() != self.width {
            return Err(ModelError::WidthMismatch {
                expected: self.width,
                found: code.width(),
            });
        }
        Ok(())
    }

    /// Latest activation timestamp in the database.
    pub fn latest_activation(&self) -> Option<DateTime<Utc>> {
        self.entries.values().map(|r| r.activated_at).max()
    }

    /// Inserts `code`; returns `false` if it was already present, in which
    /// case the existing record is kept.
    pub fn insert(
        &mut self,
        code: TagCode,
        mut record: ActivationRecord,
    ) -> Result<bool, ModelError> {
        self.check(&code)?;
        if self.entries.contains_key(&code) {
            return Ok(false);
        }
        if let Some(latest) = self.latest_activation() {
            record.activated_at = record.activated_at.max(latest);
        }
        record.activated_at = truncate_to_seconds(record.activated_at);
        self.entries.insert(code, record);
        Ok(true)
    }

    /// Inserts a persisted record verbatim. Returns `false` on a duplicate.
    pub(crate) fn restore(
        &mut self,
        code: TagCode,
        record: ActivationRecord,
    ) -> Result<bool, ModelError> {
        self.check(&code)?;
        if self.entries.contains_key(&code) {
            return Ok(false);
        }
        self.entries.insert(code, record);
        Ok(true)
    }

    pub fn contains(&self, code: &TagCode) -> Result<bool, ModelError> {
        self.check(code)?;
        Ok(self.entries.contains_key(code))
    }

    pub fn record(&self, code: &TagCode) -> Result<Option<&ActivationRecord>, ModelError> {
        self.check(code)?;
        Ok(self.entries.get(code))
    }

    /// Entries in code order.
    pub fn iter(&self) -> impl Iterator<Item = (&TagCode, &ActivationRecord)> {
        self.entries.iter()
    }

    pub fn codes(&self) -> BTreeSet<TagCode> {
        self.entries.keys().cloned().collect()
    }
}

fn default_spin_up_ms() -> u64 {
    240
}
fn default_read_retries() -> u32 {
    2
}
fn default_reader_bands() -> BTreeSet<FrequencyBand> {
    BTreeSet::from([FrequencyBand::Hf13_56MHz])
}
fn default_detect_probability() -> f64 {
    0.9
}
fn default_read_ms() -> u64 {
    10
}
fn default_auth_ms() -> u64 {
    5
}

/// Drive and reader parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveConfig {
    /// Delay between insertion and the first tag read.
    #[serde(default = "default_spin_up_ms")]
    pub spin_up_ms: u64,
    /// Extra read attempts after a failed one.
    #[serde(default = "default_read_retries")]
    pub read_retries: u32,
    /// One band is a single-frequency reader, several a multimode reader.
    #[serde(default = "default_reader_bands")]
    pub reader_bands: BTreeSet<FrequencyBand>,
    #[serde(default)]
    pub bit_error_rate: f64,
    /// Chance that a read with flipped bits is reported as corrupt rather
    /// than returned as a wrong code.
    #[serde(default = "default_detect_probability")]
    pub detect_probability: f64,
    /// Duration of one tag read attempt.
    #[serde(default = "default_read_ms")]
    pub read_ms: u64,
    /// Duration of the database lookup.
    #[serde(default = "default_auth_ms")]
    pub auth_ms: u64,
}

impl Default for DriveConfig {
    fn default() -> Self {
        DriveConfig {
            spin_up_ms: default_spin_up_ms(),
            read_retries: default_read_retries(),
            reader_bands: default_reader_bands(),
            bit_error_rate: 0.0,
            detect_probability: default_detect_probability(),
            read_ms: default_read_ms(),
            auth_ms: default_auth_ms(),
        }
    }
}

impl DriveConfig {
    pub fn multimode() -> Self {
        DriveConfig {
            reader_bands: FrequencyBand::ALL.into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.reader_bands.is_empty() {
            return Err(ModelError::InvalidConfig("reader_bands is empty".into()));
        }
        for (name, p) in [
            ("bit_error_rate", self.bit_error_rate),
            ("detect_probability", self.detect_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ModelError::InvalidConfig(format!(
                    "{name} = {p} not in [0, 1]"
                )));
            }
        }
        if self.read_ms == 0 || self.auth_ms == 0 {
            return Err(ModelError::InvalidConfig(
                "read_ms and auth_ms must be positive".into(),
            ));
        }
        Ok(())
    }
}
