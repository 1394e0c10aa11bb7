//! Canonical field encoding and content addressing.
//!
//! Wire layout of an encoded field list:
//!
//! ```text
//! list  := count:u64be field*
//! field := tag:u8 len:u64be body
//! ```
//!
//! | tag  | kind   | body                               |
//! |------|--------|------------------------------------|
//! | 0x01 | bytes  | raw bytes                          |
//! | 0x02 | string | UTF-8 bytes                        |
//! | 0x03 | u64    | 8 bytes big-endian                 |
//! | 0x04 | enum   | 1 byte                             |
//! | 0x05 | list   | nested `list` encoding             |
//!
//! Every field carries its own length, so the encoding is injective over
//! typed field lists.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

const TAG_BYTES: u8 = 0x01;
const TAG_STR: u8 = 0x02;
const TAG_U64: u8 = 0x03;
const TAG_ENUM: u8 = 0x04;
const TAG_LIST: u8 = 0x05;

/// A typed value with a defined canonical form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Field<'a> {
    Bytes(&'a [u8]),
    Str(&'a str),
    U64(u64),
    Enum(u8),
    List(Vec<Field<'a>>),
}

impl Field<'_> {
    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Field::Bytes(b) => put(out, TAG_BYTES, b),
            Field::Str(s) => put(out, TAG_STR, s.as_bytes()),
            Field::U64(v) => put(out, TAG_U64, &v.to_be_bytes()),
            Field::Enum(v) => put(out, TAG_ENUM, &[*v]),
            Field::List(items) => put(out, TAG_LIST, &canonical_encode(items)),
        }
    }
}

fn put(out: &mut Vec<u8>, tag: u8, body: &[u8]) {
    out.push(tag);
    out.extend_from_slice(&(body.len() as u64).to_be_bytes());
    out.extend_from_slice(body);
}

/// Encodes an ordered field list into its canonical byte string.
pub fn canonical_encode(fields: &[Field<'_>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + fields.len() * 16);
    out.extend_from_slice(&(fields.len() as u64).to_be_bytes());
    for field in fields {
        field.write(&mut out);
    }
    out
}

/// Owned form of a decoded field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Bytes(Vec<u8>),
    Str(String),
    U64(u64),
    Enum(u8),
    List(Vec<Value>),
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated input")]
    Truncated,
    #[error("unknown field tag {0:#04x}")]
    UnknownTag(u8),
    #[error("bad field length for tag {0:#04x}")]
    BadLength(u8),
    #[error("invalid UTF-8 in string field")]
    Utf8,
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

/// Decodes a canonical field list. Rejects trailing bytes.
pub fn canonical_decode(bytes: &[u8]) -> Result<Vec<Value>, DecodeError> {
    let mut cur = bytes;
    let out = decode_list(&mut cur)?;
    if !cur.is_empty() {
        return Err(DecodeError::Trailing(cur.len()));
    }
    Ok(out)
}

fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8], DecodeError> {
    if cur.len() < n {
        return Err(DecodeError::Truncated);
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}

fn take_u64(cur: &mut &[u8]) -> Result<u64, DecodeError> {
    let raw = take(cur, 8)?;
    Ok(u64::from_be_bytes(raw.try_into().expect("8 bytes")))
}

fn decode_list(cur: &mut &[u8]) -> Result<Vec<Value>, DecodeError> {
    let count = take_u64(cur)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let tag = take(cur, 1)?[0];
        let len = take_u64(cur)?;
        let len = usize::try_from(len).map_err(|_| DecodeError::Truncated)?;
        let body = take(cur, len)?;
        let value = match tag {
            TAG_BYTES => Value::Bytes(body.to_vec()),
            TAG_STR => Value::Str(String::from_utf8(body.to_vec()).map_err(|_| DecodeError::Utf8)?),
            TAG_U64 => {
                let arr: [u8; 8] = body.try_into().map_err(|_| DecodeError::BadLength(tag))?;
                Value::U64(u64::from_be_bytes(arr))
            }
            TAG_ENUM => {
                if body.len() != 1 {
                    return Err(DecodeError::BadLength(tag));
                }
                Value::Enum(body[0])
            }
            TAG_LIST => {
                let mut inner = body;
                let items = decode_list(&mut inner)?;
                if !inner.is_empty() {
                    return Err(DecodeError::Trailing(inner.len()));
                }
                Value::List(items)
            }
            other => return Err(DecodeError::UnknownTag(other)),
        };
        out.push(value);
    }
    Ok(out)
}

/// A 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    /// The null marker used for a missing predecessor or the genesis link.
    pub const ZERO: ContentHash = ContentHash([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0u8; 32]
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(ContentHash(out))
    }

    /// Shortened form for logs and CLI output.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..6])
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.short())
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ContentHash::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// SHA-256 of raw bytes.
pub fn content_hash(content: &[u8]) -> ContentHash {
    ContentHash(Sha256::digest(content).into())
}

/// Hash of a canonical field list.
pub fn hash_fields(fields: &[Field<'_>]) -> ContentHash {
    content_hash(&canonical_encode(fields))
}

/// Content-addressed skill identifier over (payload, developer, predecessor, timestamp).
///
/// A first version passes `None`, which is encoded as 32 zero bytes.
pub fn derive_skill_id(
    content_payload: &[u8],
    developer: &str,
    prev_version: Option<&ContentHash>,
    timestamp: u64,
) -> ContentHash {
    let prev = prev_version.copied().unwrap_or(ContentHash::ZERO);
    hash_fields(&[
        Field::Bytes(content_payload),
        Field::Str(developer),
        Field::Bytes(prev.as_bytes()),
        Field::U64(timestamp),
    ])
}

/// Serde helpers for fixed-size byte arrays and byte vectors as hex strings.
pub(crate) mod hexser {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, T: AsRef<[u8]>>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v.as_ref()))
    }

    pub fn deserialize<'de, D, T>(d: D) -> Result<T, D::Error>
    where
        D: Deserializer<'de>,
        T: TryFrom<Vec<u8>>,
    {
        let s = String::deserialize(d)?;
        let raw = hex::decode(s).map_err(serde::de::Error::custom)?;
        T::try_from(raw).map_err(|_| serde::de::Error::custom("unexpected byte length"))
    }
}
