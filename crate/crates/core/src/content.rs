//! Disc images sealed to a (tag code, visible serial) pair.
//!
//! The content key is HKDF-SHA-256 over the tag code bytes, salted with the
//! serial. Each sector is AES-256-GCM sealed under that key with its own
//! random nonce and its big-endian `u64` index as associated data. An
//! HMAC-SHA-256 over everything before it closes the image, so headers,
//! sector order and sector count are all authenticated.
//!
//! File layout:
//!
//! ```text
//! "TDIMG1"
//! u32 BE header length ‖ header JSON
//!   {"version":1,"serial":..,"code_width":..,"sector_size":..,"sector_count":..}
//! per sector: nonce(12) ‖ u32 BE ciphertext length ‖ ciphertext ‖ gcm tag(16)
//! image tag: HMAC-SHA-256(mac key, all preceding bytes)   (32 bytes)
//! ```
//!
//! The MAC key is HKDF-SHA-256(content key, empty salt, "tagdrive-image-mac-v1").

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, GCM_TAG_LEN, KEY_LEN, MAC_LEN, NONCE_LEN};
use crate::exec::Execution;
use crate::model::{TagCode, VisibleSerial};

pub const IMAGE_MAGIC: &[u8; 6] = b"TDIMG1";
pub const IMAGE_VERSION: u32 = 1;
pub const DEFAULT_SECTOR_SIZE: u32 = 2048;
pub const CONTENT_INFO: &[u8] = b"tagdrive-content-v1";
pub const IMAGE_MAC_INFO: &[u8] = b"tagdrive-image-mac-v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContentError {
    /// Wrong code, wrong serial or tampered data; deliberately uninformative.
    #[error("content failed authentication")]
    ContentAuthFailure,
    #[error("image header corrupt: {0}")]
    HeaderCorrupt(String),
    #[error("sector {index} holds {len} bytes, limit is {limit}")]
    OversizeSector {
        index: usize,
        len: usize,
        limit: u32,
    },
    #[error("code width mismatch: image expects {expected} bits, got {found}")]
    WidthMismatch { expected: u32, found: u32 },
}

pub type ContentKey = [u8; KEY_LEN];

/// Key for the content bound to `(code, serial)`.
pub fn derive_content_key(code: &TagCode, serial: &VisibleSerial) -> ContentKey {
    crypto::hkdf_sha256(code.as_bytes(), serial.as_str().as_bytes(), CONTENT_INFO)
}

/// Same as [`derive_content_key`], refusing codes of the wrong width.
pub fn derive_content_key_checked(
    code: &TagCode,
    serial: &VisibleSerial,
    width: u32,
) -> Result<ContentKey, ContentError> {
    if code.width() != width {
        return Err(ContentError::WidthMismatch {
            expected: width,
            found: code.width(),
        });
    }
    Ok(derive_content_key(code, serial))
}

fn mac_key(content_key: &ContentKey) -> [u8; KEY_LEN] {
    crypto::hkdf_sha256(content_key, &[], IMAGE_MAC_INFO)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageHeader {
    pub version: u32,
    pub serial: VisibleSerial,
    pub code_width: u32,
    pub sector_size: u32,
    pub sector_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedSector {
    pub nonce: [u8; NONCE_LEN],
    /// Ciphertext followed by the GCM tag.
    pub ciphertext: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedImage {
    header: ImageHeader,
    /// Header exactly as authenticated.
    header_json: Vec<u8>,
    sectors: Vec<SealedSector>,
    image_tag: [u8; MAC_LEN],
}

impl SealedImage {
    pub fn header(&self) -> &ImageHeader {
        &self.header
    }

    pub fn sectors(&self) -> &[SealedSector] {
        &self.sectors
    }

    pub fn sectors_mut(&mut self) -> &mut [SealedSector] {
        &mut self.sectors
    }

    /// Every byte before the image tag.
    fn body(&self) -> Vec<u8> {
        let size: usize = self
            .sectors
            .iter()
            .map(|s| NONCE_LEN + 4 + s.ciphertext.len())
            .sum();
        let mut out = Vec::with_capacity(IMAGE_MAGIC.len() + 4 + self.header_json.len() + size);
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&(self.header_json.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.header_json);
        for s in &self.sectors {
            out.extend_from_slice(&s.nonce);
            out.extend_from_slice(&(s.ciphertext.len() as u32).to_be_bytes());
            out.extend_from_slice(&s.ciphertext);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body();
        out.extend_from_slice(&self.image_tag);
        out
    }

    /// Parses the container. Structural problems are `HeaderCorrupt`;
    /// nothing is authenticated until [`open_content`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContentError> {
        let corrupt = |m: &str| ContentError::HeaderCorrupt(m.to_owned());
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(IMAGE_MAGIC.len())
            .ok_or_else(|| corrupt("truncated magic"))?
            != IMAGE_MAGIC
        {
            return Err(corrupt("bad magic"));
        }
        let hlen = r.u32().ok_or_else(|| corrupt("truncated header length"))? as usize;
        let header_json = r
            .take(hlen)
            .ok_or_else(|| corrupt("truncated header"))?
            .to_vec();
        let header: ImageHeader = serde_json::from_slice(&header_json)
            .map_err(|e| ContentError::HeaderCorrupt(e.to_string()))?;
        if header.version != IMAGE_VERSION {
            return Err(ContentError::HeaderCorrupt(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let max_ct = header.sector_size as usize + GCM_TAG_LEN;
        // each sector record is at least nonce + length + tag
        let min_record = NONCE_LEN + 4 + GCM_TAG_LEN;
        if header.sector_count > (bytes.len() / min_record) as u64 {
            return Err(corrupt("sector count exceeds image size"));
        }
        let mut sectors = Vec::with_capacity(header.sector_count as usize);
        for _ in 0..header.sector_count {
            let nonce: [u8; NONCE_LEN] = r
                .take(NONCE_LEN)
                .ok_or_else(|| corrupt("truncated sector"))?
                .try_into()
                .expect("exact length");
            let len = r.u32().ok_or_else(|| corrupt("truncated sector"))? as usize;
            if !(GCM_TAG_LEN..=max_ct).contains(&len) {
                return Err(corrupt("sector length out of range"));
            }
            let ciphertext = r
                .take(len)
                .ok_or_else(|| corrupt("truncated sector"))?
                .to_vec();
            sectors.push(SealedSector { nonce, ciphertext });
        }
        let image_tag: [u8; MAC_LEN] = r
            .take(MAC_LEN)
            .ok_or_else(|| corrupt("truncated image tag"))?
            .try_into()
            .expect("exact length");
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes after image tag"));
        }
        Ok(SealedImage {
            header,
            header_json,
            sectors,
            image_tag,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Splits a flat payload into sectors of `sector_size` bytes (the last may be short).
pub fn split_sectors(data: &[u8], sector_size: u32) -> Vec<Vec<u8>> {
    data.chunks(sector_size.max(1) as usize)
        .map(<[u8]>::to_vec)
        .collect()
}

/// Seals `sectors` with the default sector size and execution strategy.
pub fn seal_content<R: RngCore + ?Sized>(
    sectors: &[Vec<u8>],
    code: &TagCode,
    serial: &VisibleSerial,
    rng: &mut R,
) -> Result<SealedImage, ContentError> {
    seal_content_with(
        sectors,
        code,
        serial,
        DEFAULT_SECTOR_SIZE,
        rng,
        Execution::default(),
    )
}

pub fn seal_content_with<R: RngCore + ?Sized>(
    sectors: &[Vec<u8>],
    code: &TagCode,
    serial: &VisibleSerial,
    sector_size: u32,
    rng: &mut R,
    exec: Execution,
) -> Result<SealedImage, ContentError> {
    if sector_size == 0 {
        return Err(ContentError::HeaderCorrupt(
            "sector size must be positive".into(),
        ));
    }
    if let Some((index, s)) = sectors
        .iter()
        .enumerate()
        .find(|(_, s)| s.len() > sector_size as usize)
    {
        return Err(ContentError::OversizeSector {
            index,
            len: s.len(),
            limit: sector_size,
        });
    }
    let key = derive_content_key(code, serial);
    // Nonces are drawn up front so the result does not depend on `exec`.
    let jobs: Vec<(u64, &[u8], [u8; NONCE_LEN])> = sectors
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut nonce = [0u8; NONCE_LEN];
            rng.fill_bytes(&mut nonce);
            (i as u64, s.as_slice(), nonce)
        })
        .collect();
    let sealed = exec.map(&jobs, |(i, payload, nonce)| SealedSector {
        nonce: *nonce,
        ciphertext: crypto::gcm_seal(&key, nonce, payload, &i.to_be_bytes()),
    });
    let header = ImageHeader {
        version: IMAGE_VERSION,
        serial: serial.clone(),
        code_width: code.width(),
        sector_size,
        sector_count: sectors.len() as u64,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut image = SealedImage {
        header,
        header_json,
        sectors: sealed,
        image_tag: [0; MAC_LEN],
    };
    image.image_tag = crypto::hmac_sha256(&mac_key(&key), &[&image.body()]);
    Ok(image)
}

pub fn open_content(
    image: &SealedImage,
    code: &TagCode,
    serial: &VisibleSerial,
) -> Result<Vec<Vec<u8>>, ContentError> {
    open_content_with(image, code, serial, Execution::default())
}

/// Decrypts every sector or none: on any failure no plaintext is returned.
pub fn open_content_with(
    image: &SealedImage,
    code: &TagCode,
    serial: &VisibleSerial,
    exec: Execution,
) -> Result<Vec<Vec<u8>>, ContentError> {
    let key = derive_content_key_checked(code, serial, image.header.code_width)?;
    if image.sectors.len() as u64 != image.header.sector_count {
        return Err(ContentError::HeaderCorrupt(
            "sector count does not match header".into(),
        ));
    }
    if !crypto::hmac_sha256_verify(&mac_key(&key), &[&image.body()], &image.image_tag) {
        return Err(ContentError::ContentAuthFailure);
    }
    let indexed: Vec<(u64, &SealedSector)> = image
        .sectors
        .iter()
        .enumerate()
        .map(|(i, s)| (i as u64, s))
        .collect();
    let opened = exec.map(&indexed, |(i, s)| {
        crypto::gcm_open(&key, &s.nonce, &s.ciphertext, &i.to_be_bytes())
    });
    opened
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or(ContentError::ContentAuthFailure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn code96() -> TagCode {
        TagCode::from_bytes(96, &(0u8..12).collect::<Vec<_>>()).unwrap()
    }

    fn serial() -> VisibleSerial {
        VisibleSerial::new("TEST-0001").unwrap()
    }

    fn random_sectors(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<u8>> {
        (0..n)
            .map(|_| {
                let len = rng.random_range(0..=DEFAULT_SECTOR_SIZE as usize);
                let mut s = vec![0u8; len];
                rng.fill_bytes(&mut s);
                s
            })
            .collect()
    }

    #[test]
    fn key_is_deterministic_and_sensitive_to_every_bit() {
        let k = derive_content_key(&code96(), &serial());
        assert_eq!(k, derive_content_key(&code96(), &serial()));
        for bit in 0..96 {
            assert_ne!(
                derive_content_key(&code96().with_bit_flipped(bit), &serial()),
                k,
                "bit {bit}"
            );
        }
        assert!(matches!(
            derive_content_key_checked(&code96(), &serial(), 4),
            Err(ContentError::WidthMismatch { .. })
        ));
    }

    #[test]
    fn empty_image_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = seal_content(&[], &code96(), &serial(), &mut rng).unwrap();
        assert!(open_content(&img, &code96(), &serial()).unwrap().is_empty());
        let back = SealedImage::from_bytes(&img.to_bytes()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn hundred_random_sectors_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sectors = random_sectors(&mut rng, 100);
        let img = seal_content(&sectors, &code96(), &serial(), &mut rng).unwrap();
        assert_eq!(open_content(&img, &code96(), &serial()).unwrap(), sectors);
        let parsed = SealedImage::from_bytes(&img.to_bytes()).unwrap();
        assert_eq!(
            open_content_with(&parsed, &code96(), &serial(), Execution::Sequential).unwrap(),
            sectors
        );
    }

    #[test]
    fn fresh_nonces_each_seal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sectors = vec![b"same payload".to_vec()];
        let a = seal_content(&sectors, &code96(), &serial(), &mut rng).unwrap();
        let b = seal_content(&sectors, &code96(), &serial(), &mut rng).unwrap();
        assert_ne!(a.to_bytes(), b.to_bytes());
        assert_eq!(open_content(&a, &code96(), &serial()).unwrap(), sectors);
        assert_eq!(open_content(&b, &code96(), &serial()).unwrap(), sectors);
    }

    #[test]
    fn sealing_is_independent_of_execution() {
        let sectors = random_sectors(&mut ChaCha8Rng::seed_from_u64(3), 20);
        let a = seal_content_with(
            &sectors,
            &code96(),
            &serial(),
            2048,
            &mut ChaCha8Rng::seed_from_u64(9),
            Execution::Sequential,
        )
        .unwrap();
        let b = seal_content_with(
            &sectors,
            &code96(),
            &serial(),
            2048,
            &mut ChaCha8Rng::seed_from_u64(9),
            Execution::default(),
        )
        .unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn wrong_code_or_serial_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = seal_content(&[b"payload".to_vec()], &code96(), &serial(), &mut rng).unwrap();
        let other = VisibleSerial::new("TEST-0002").unwrap();
        assert_eq!(
            open_content(&img, &code96(), &other),
            Err(ContentError::ContentAuthFailure)
        );
        assert_eq!(
            open_content(&img, &code96().with_bit_flipped(95), &serial()),
            Err(ContentError::ContentAuthFailure)
        );
    }

    #[test]
    fn oversize_sector_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sectors = vec![vec![0u8; 10], vec![0u8; 2049]];
        assert_eq!(
            seal_content(&sectors, &code96(), &serial(), &mut rng),
            Err(ContentError::OversizeSector {
                index: 1,
                len: 2049,
                limit: 2048
            })
        );
    }

    #[test]
    fn sector_flip_releases_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sectors = random_sectors(&mut rng, 10);
        let img = seal_content(&sectors, &code96(), &serial(), &mut rng).unwrap();
        for i in 0..img.sectors().len() {
            let mut t = img.clone();
            let ct = &mut t.sectors_mut()[i].ciphertext;
            let last = ct.len() - 1;
            ct[last] ^= 1;
            assert_eq!(
                open_content(&t, &code96(), &serial()),
                Err(ContentError::ContentAuthFailure)
            );
        }
    }

    #[test]
    fn reordering_and_truncation_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sectors = random_sectors(&mut rng, 4);
        let img = seal_content(&sectors, &code96(), &serial(), &mut rng).unwrap();
        let mut swapped = img.clone();
        swapped.sectors_mut().swap(0, 1);
        assert_eq!(
            open_content(&swapped, &code96(), &serial()),
            Err(ContentError::ContentAuthFailure)
        );

        let bytes = img.to_bytes();
        assert!(matches!(
            SealedImage::from_bytes(&bytes[..bytes.len() - 1]),
            Err(ContentError::HeaderCorrupt(_))
        ));
        assert!(matches!(
            SealedImage::from_bytes(b"NOTIMG"),
            Err(ContentError::HeaderCorrupt(_))
        ));
    }

    #[test]
    fn header_tamper_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = seal_content(&[b"x".to_vec()], &code96(), &serial(), &mut rng).unwrap();
        let bytes = img.to_bytes();
        let text = String::from_utf8_lossy(&bytes);
        let pos = text.find("2048").unwrap();
        let mut t = bytes.clone();
        t[pos] = b'4'; // sector_size 4048
        let parsed = SealedImage::from_bytes(&t).unwrap();
        assert_eq!(
            open_content(&parsed, &code96(), &serial()),
            Err(ContentError::ContentAuthFailure)
        );
    }

    #[test]
    fn split_into_sectors() {
        let data = vec![7u8; 5000];
        let s = split_sectors(&data, 2048);
        assert_eq!(
            s.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![2048, 2048, 904]
        );
        assert!(split_sectors(&[], 2048).is_empty());
    }
}
