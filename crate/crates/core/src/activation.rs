//! Vendor-side provisioning and client-side activation.
//!
//! Each provisioned disc gets a random tag code and an independent visible
//! serial. The code is published as an [`ActivationBlob`]: AES-256-GCM under
//! a key derived with HKDF-SHA-256 from the purchase secret printed on the
//! retail package. Blobs are public; only the secret unlocks them.
//!
//! Blob layout: `version(1) ‖ salt(16) ‖ nonce(12) ‖ ciphertext ‖ tag(16)`.
//! The associated data is `version ‖ serial`, which ties a blob to the serial
//! it was published under.

use std::collections::BTreeMap;
use std::fmt;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use chrono::{DateTime, Utc};
use rand::{Rng, RngCore};
use thiserror::Error;

use crate::crypto::{self, GCM_TAG_LEN, NONCE_LEN};
use crate::model::{
    code_byte_len, truncate_to_seconds, ActivationRecord, ActivationSource, CodeDatabase,
    FrequencyBand, ModelError, RfidTag, TagCode, VisibleSerial,
};

pub const BLOB_VERSION: u8 = 1;
pub const SALT_LEN: usize = 16;
pub const ACTIVATION_INFO: &[u8] = b"tagdrive-activation-v1";
/// Serial draws before provisioning gives up with `SerialCollision`.
pub const SERIAL_ATTEMPTS: usize = 5;

const BLOB_HEADER_LEN: usize = 1 + SALT_LEN + NONCE_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActivationError {
    /// Wrong secret, wrong serial, or a tampered blob. Reveals nothing.
    #[error("activation blob failed authentication")]
    BlobAuthFailure,
    #[error("malformed activation blob: {0}")]
    BlobMalformed(String),
    #[error("could not draw a fresh serial after {SERIAL_ATTEMPTS} attempts")]
    SerialCollision,
    #[error("invalid purchase secret")]
    InvalidSecret,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// 16 characters over a 32-symbol alphabet without look-alike glyphs
/// (no I, O, 0, 1), i.e. 80 bits.
#[derive(Clone, PartialEq, Eq)]
pub struct PurchaseSecret(String);

impl PurchaseSecret {
    pub const ALPHABET: &'static [u8; 32] = b"ABCDEFGHJKLMNPQRSTUVWXYZ23456789";
    pub const LEN: usize = 16;

    /// Accepts lowercase input; stored uppercase.
    pub fn new(text: &str) -> Result<Self, ActivationError> {
        let upper = text.to_ascii_uppercase();
        if upper.len() == Self::LEN && upper.bytes().all(|b| Self::ALPHABET.contains(&b)) {
            Ok(PurchaseSecret(upper))
        } else {
            Err(ActivationError::InvalidSecret)
        }
    }

    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let s = (0..Self::LEN)
            .map(|_| Self::ALPHABET[rng.random_range(0..Self::ALPHABET.len())] as char)
            .collect();
        PurchaseSecret(s)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn entropy_bits() -> f64 {
        Self::LEN as f64 * (Self::ALPHABET.len() as f64).log2()
    }
}

impl fmt::Debug for PurchaseSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PurchaseSecret(<redacted>)")
    }
}

pub fn derive_activation_key(secret: &PurchaseSecret, salt: &[u8; SALT_LEN]) -> [u8; 32] {
    crypto::hkdf_sha256(secret.as_str().as_bytes(), salt, ACTIVATION_INFO)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationBlob {
    pub version: u8,
    pub salt: [u8; SALT_LEN],
    pub nonce: [u8; NONCE_LEN],
    /// Ciphertext followed by the 16-byte GCM tag.
    pub ciphertext: Vec<u8>,
}

fn blob_aad(version: u8, serial: &VisibleSerial) -> Vec<u8> {
    let mut aad = Vec::with_capacity(1 + serial.as_str().len());
    aad.push(version);
    aad.extend_from_slice(serial.as_str().as_bytes());
    aad
}

impl ActivationBlob {
    /// Seals `code` with explicit salt and nonce.
    pub fn seal_with(
        code: &TagCode,
        serial: &VisibleSerial,
        secret: &PurchaseSecret,
        salt: [u8; SALT_LEN],
        nonce: [u8; NONCE_LEN],
    ) -> Self {
        let key = derive_activation_key(secret, &salt);
        let ciphertext = crypto::gcm_seal(
            &key,
            &nonce,
            code.as_bytes(),
            &blob_aad(BLOB_VERSION, serial),
        );
        ActivationBlob {
            version: BLOB_VERSION,
            salt,
            nonce,
            ciphertext,
        }
    }

    pub fn seal<R: RngCore + ?Sized>(
        code: &TagCode,
        serial: &VisibleSerial,
        secret: &PurchaseSecret,
        rng: &mut R,
    ) -> Self {
        let mut salt = [0u8; SALT_LEN];
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut salt);
        rng.fill_bytes(&mut nonce);
        Self::seal_with(code, serial, secret, salt, nonce)
    }

    /// Recovers the code. Any tampering, a wrong secret or a wrong serial
    /// yields `BlobAuthFailure`; a correctly authenticated payload of the
    /// wrong size yields `WidthMismatch`.
    pub fn open(
        &self,
        serial: &VisibleSerial,
        secret: &PurchaseSecret,
        width: u32,
    ) -> Result<TagCode, ActivationError> {
        if self.version != BLOB_VERSION {
            return Err(ActivationError::BlobAuthFailure);
        }
        let key = derive_activation_key(secret, &self.salt);
        let plain = crypto::gcm_open(
            &key,
            &self.nonce,
            &self.ciphertext,
            &blob_aad(self.version, serial),
        )
        .ok_or(ActivationError::BlobAuthFailure)?;
        if plain.len() != code_byte_len(width) {
            return Err(ModelError::WidthMismatch {
                expected: width,
                found: plain.len() as u32 * 8,
            }
            .into());
        }
        Ok(TagCode::from_bytes(width, &plain)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BLOB_HEADER_LEN + self.ciphertext.len());
        out.push(self.version);
        out.extend_from_slice(&self.salt);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ActivationError> {
        if bytes.len() < BLOB_HEADER_LEN + GCM_TAG_LEN {
            return Err(ActivationError::BlobMalformed(format!(
                "{} bytes is too short",
                bytes.len()
            )));
        }
        Ok(ActivationBlob {
            version: bytes[0],
            salt: bytes[1..1 + SALT_LEN].try_into().expect("length checked"),
            nonce: bytes[1 + SALT_LEN..BLOB_HEADER_LEN]
                .try_into()
                .expect("length checked"),
            ciphertext: bytes[BLOB_HEADER_LEN..].to_vec(),
        })
    }

    pub fn to_base64(&self) -> String {
        BASE64.encode(self.to_bytes())
    }

    pub fn from_base64(text: &str) -> Result<Self, ActivationError> {
        let bytes = BASE64
            .decode(text)
            .map_err(|e| ActivationError::BlobMalformed(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

/// Unlocks `blob` and authorizes its code in `db`. On failure `db` is left
/// untouched. Activating the same disc twice is a no-op.
pub fn activate(
    db: &mut CodeDatabase,
    blob: &ActivationBlob,
    secret: &PurchaseSecret,
    serial: &VisibleSerial,
    now: DateTime<Utc>,
) -> Result<TagCode, ActivationError> {
    let code = blob.open(serial, secret, db.width())?;
    db.insert(
        code.clone(),
        ActivationRecord::new(serial.clone(), now, ActivationSource::RemoteActivation),
    )?;
    Ok(code)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub blob: ActivationBlob,
    pub provisioned_at: DateTime<Utc>,
}

/// Vendor registry: visible serial to published blob. Holds no plaintext
/// codes and no secrets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerialRegistry {
    width: u32,
    entries: BTreeMap<VisibleSerial, RegistryEntry>,
}

impl SerialRegistry {
    pub fn new(width: u32) -> Result<Self, ModelError> {
        // reuse the database width check
        CodeDatabase::new(width)?;
        Ok(SerialRegistry {
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

    pub fn get(&self, serial: &VisibleSerial) -> Option<&RegistryEntry> {
        self.entries.get(serial)
    }

    pub fn contains(&self, serial: &VisibleSerial) -> bool {
        self.entries.contains_key(serial)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VisibleSerial, &RegistryEntry)> {
        self.entries.iter()
    }

    /// Adds an entry; an existing serial is never overwritten.
    pub fn insert(
        &mut self,
        serial: VisibleSerial,
        entry: RegistryEntry,
    ) -> Result<(), ActivationError> {
        if self.entries.contains_key(&serial) {
            return Err(ActivationError::SerialCollision);
        }
        self.entries.insert(serial, entry);
        Ok(())
    }
}

/// Everything the factory needs for one disc.
#[derive(Debug, Clone)]
pub struct ProvisionedDisc {
    pub serial: VisibleSerial,
    pub tag: RfidTag,
    pub blob: ActivationBlob,
}

/// Mints a random code of the registry's width and provisions it.
pub fn provision_disc<R: RngCore + ?Sized>(
    registry: &mut SerialRegistry,
    secret: &PurchaseSecret,
    band: FrequencyBand,
    rng: &mut R,
    now: DateTime<Utc>,
) -> Result<ProvisionedDisc, ActivationError> {
    let code = TagCode::random(registry.width(), rng)?;
    provision_code(registry, code, secret, band, rng, now)
}

/// Provisions a caller-chosen code under a fresh serial.
pub fn provision_code<R: RngCore + ?Sized>(
    registry: &mut SerialRegistry,
    code: TagCode,
    secret: &PurchaseSecret,
    band: FrequencyBand,
    rng: &mut R,
    now: DateTime<Utc>,
) -> Result<ProvisionedDisc, ActivationError> {
    if code.width() != registry.width() {
        return Err(ModelError::WidthMismatch {
            expected: registry.width(),
            found: code.width(),
        }
        .into());
    }
    let serial = (0..SERIAL_ATTEMPTS)
        .map(|_| VisibleSerial::random(rng))
        .find(|s| !registry.contains(s))
        .ok_or(ActivationError::SerialCollision)?;
    let blob = ActivationBlob::seal(&code, &serial, secret, rng);
    registry.insert(
        serial.clone(),
        RegistryEntry {
            blob: blob.clone(),
            provisioned_at: truncate_to_seconds(now),
        },
    )?;
    Ok(ProvisionedDisc {
        serial,
        tag: RfidTag::new(code, band),
        blob,
    })
}
