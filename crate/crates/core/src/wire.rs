//! Message grammar, keystream cipher, CRC and SMS framing.
//!
//! A logical message travels as:
//!
//! ```text
//! LogicalMessage -> canonical text -> ASCII bytes -> xor keystream -> uppercase hex
//!                -> 138-char chunks -> "S|<msgid>|<seq>|<total>|<crc>|<body>" frames
//! ```
//!
//! Every rendered frame is at most 160 characters.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::smsc::PhoneNumber;

/// Maximum rendered SMS length.
pub const MAX_FRAME_LEN: usize = 160;
/// Fixed header length: `S|` + 8 + `|` + 2 + `|` + 2 + `|` + 4 + `|`.
pub const HEADER_LEN: usize = 22;
pub const MAX_BODY_LEN: usize = MAX_FRAME_LEN - HEADER_LEN;
pub const MAX_SEGMENTS: usize = 99;
pub const MAX_COUNTER: u32 = 0x00FF_FFFF;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("illegal character {ch:?} in {field}")]
    IllegalCharacter { field: &'static str, ch: char },
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("payload of {len} hex chars needs more than {MAX_SEGMENTS} segments")]
    PayloadTooLarge { len: usize },
    #[error("segment {missing} of {total} missing")]
    Incomplete { missing: u8, total: u8 },
    #[error("checksum mismatch on segment {seq}")]
    ChecksumMismatch { seq: u8 },
    #[error("inconsistent segments: {0}")]
    Inconsistent(String),
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
}

/// Site tag plus a 24-bit counter, rendered as 8 uppercase hex characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MessageId {
    site: u8,
    counter: u32,
}

impl MessageId {
    pub fn new(site: u8, counter: u32) -> Result<Self, WireError> {
        if counter > MAX_COUNTER {
            return Err(WireError::Malformed(format!(
                "message counter {counter} exceeds 24 bits"
            )));
        }
        Ok(Self { site, counter })
    }

    pub fn site(&self) -> u8 {
        self.site
    }

    pub fn counter(&self) -> u32 {
        self.counter
    }
}

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02X}{:06X}", self.site, self.counter)
    }
}

impl FromStr for MessageId {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 8 || !s.bytes().all(is_upper_hex) {
            return Err(WireError::Malformed(format!("bad message id {s:?}")));
        }
        let site = u8::from_str_radix(&s[..2], 16).expect("validated hex");
        let counter = u32::from_str_radix(&s[2..], 16).expect("validated hex");
        Ok(Self { site, counter })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlertCode {
    /// Suspicious transaction: a business-rule threshold was exceeded.
    Susp,
    /// Invalid database object.
    Iobj,
    /// Database link down, transaction rerouted over SMS.
    Link,
}

impl AlertCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AlertCode::Susp => "SUSP",
            AlertCode::Iobj => "IOBJ",
            AlertCode::Link => "LINK",
        }
    }
}

impl FromStr for AlertCode {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SUSP" => Ok(AlertCode::Susp),
            "IOBJ" => Ok(AlertCode::Iobj),
            "LINK" => Ok(AlertCode::Link),
            _ => Err(WireError::Malformed(format!("unknown alert code {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResultStatus {
    Ok,
    Err,
}

impl ResultStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ResultStatus::Ok => "OK",
            ResultStatus::Err => "ERR",
        }
    }
}

impl FromStr for ResultStatus {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, WireError> {
        match s {
            "OK" => Ok(ResultStatus::Ok),
            "ERR" => Ok(ResultStatus::Err),
            _ => Err(WireError::Malformed(format!("unknown result status {s:?}"))),
        }
    }
}

/// Application-level unit exchanged between sites and phones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogicalMessage {
    Txn {
        id: MessageId,
        account: u64,
        delta: i64,
    },
    Alert {
        id: MessageId,
        code: AlertCode,
        text: String,
    },
    QueryReq {
        id: MessageId,
        account: u64,
    },
    /// `balance` is `None` when the account is unknown at the answering
    /// site; it renders as the literal `ERR`.
    QueryResp {
        id: MessageId,
        in_reply_to: MessageId,
        account: u64,
        balance: Option<i64>,
    },
    Result {
        id: MessageId,
        in_reply_to: MessageId,
        status: ResultStatus,
        detail: String,
    },
}

impl LogicalMessage {
    pub fn id(&self) -> MessageId {
        match self {
            LogicalMessage::Txn { id, .. }
            | LogicalMessage::Alert { id, .. }
            | LogicalMessage::QueryReq { id, .. }
            | LogicalMessage::QueryResp { id, .. }
            | LogicalMessage::Result { id, .. } => *id,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LogicalMessage::Txn { .. } => "TXN",
            LogicalMessage::Alert { .. } => "ALR",
            LogicalMessage::QueryReq { .. } => "QRY",
            LogicalMessage::QueryResp { .. } => "QRS",
            LogicalMessage::Result { .. } => "RES",
        }
    }
}

/// Free-text fields: printable ASCII, no `|`.
pub fn check_text(field: &'static str, text: &str) -> Result<(), WireError> {
    match text.chars().find(|&c| !is_text_char(c)) {
        Some(ch) => Err(WireError::IllegalCharacter { field, ch }),
        None => Ok(()),
    }
}

fn is_text_char(c: char) -> bool {
    (' '..='~').contains(&c) && c != '|'
}

fn is_upper_hex(b: u8) -> bool {
    b.is_ascii_digit() || (b'A'..=b'F').contains(&b)
}

pub fn encode_message(msg: &LogicalMessage) -> Result<String, WireError> {
    let text = match msg {
        LogicalMessage::Txn { id, account, delta } => format!("TXN|{id}|{account}|{delta}"),
        LogicalMessage::Alert { id, code, text } => {
            check_text("text", text)?;
            format!("ALR|{id}|{}|{text}", code.as_str())
        }
        LogicalMessage::QueryReq { id, account } => format!("QRY|{id}|{account}"),
        LogicalMessage::QueryResp {
            id,
            in_reply_to,
            account,
            balance,
        } => match balance {
            Some(b) => format!("QRS|{id}|{in_reply_to}|{account}|{b}"),
            None => format!("QRS|{id}|{in_reply_to}|{account}|ERR"),
        },
        LogicalMessage::Result {
            id,
            in_reply_to,
            status,
            detail,
        } => {
            check_text("detail", detail)?;
            format!("RES|{id}|{in_reply_to}|{}|{detail}", status.as_str())
        }
    };
    Ok(text)
}

pub fn decode_message(text: &str) -> Result<LogicalMessage, WireError> {
    let fields: Vec<&str> = text.split('|').collect();
    let expect = |n: usize| {
        if fields.len() == n {
            Ok(())
        } else {
            Err(WireError::Malformed(format!(
                "{} expects {n} fields, got {}",
                fields[0],
                fields.len()
            )))
        }
    };
    let msg = match fields[0] {
        "TXN" => {
            expect(4)?;
            LogicalMessage::Txn {
                id: fields[1].parse()?,
                account: parse_unsigned("account", fields[2])?,
                delta: parse_signed("delta", fields[3])?,
            }
        }
        "ALR" => {
            expect(4)?;
            check_text("text", fields[3]).map_err(|e| WireError::Malformed(e.to_string()))?;
            LogicalMessage::Alert {
                id: fields[1].parse()?,
                code: fields[2].parse()?,
                text: fields[3].to_owned(),
            }
        }
        "QRY" => {
            expect(3)?;
            LogicalMessage::QueryReq {
                id: fields[1].parse()?,
                account: parse_unsigned("account", fields[2])?,
            }
        }
        "QRS" => {
            expect(5)?;
            let balance = match fields[4] {
                "ERR" => None,
                b => Some(parse_signed("balance", b)?),
            };
            LogicalMessage::QueryResp {
                id: fields[1].parse()?,
                in_reply_to: fields[2].parse()?,
                account: parse_unsigned("account", fields[3])?,
                balance,
            }
        }
        "RES" => {
            expect(5)?;
            check_text("detail", fields[4]).map_err(|e| WireError::Malformed(e.to_string()))?;
            LogicalMessage::Result {
                id: fields[1].parse()?,
                in_reply_to: fields[2].parse()?,
                status: fields[3].parse()?,
                detail: fields[4].to_owned(),
            }
        }
        tag => return Err(WireError::Malformed(format!("unknown tag {tag:?}"))),
    };
    Ok(msg)
}

fn parse_unsigned(field: &str, s: &str) -> Result<u64, WireError> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(WireError::Malformed(format!("{field} is not numeric: {s:?}")));
    }
    s.parse()
        .map_err(|_| WireError::Malformed(format!("{field} out of range: {s:?}")))
}

fn parse_signed(field: &str, s: &str) -> Result<i64, WireError> {
    let digits = s.strip_prefix('-').unwrap_or(s);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(WireError::Malformed(format!("{field} is not numeric: {s:?}")));
    }
    s.parse()
        .map_err(|_| WireError::Malformed(format!("{field} out of range: {s:?}")))
}

/// Key shared by both sites. Any value, including 0, is valid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretKey(pub u64);

/// First `n` bytes of the splitmix64 stream seeded with `key`, each output
/// word laid out little-endian.
pub fn keystream(key: SecretKey, n: usize) -> Vec<u8> {
    let mut rng = SplitMix64::new(key.0);
    let mut out = Vec::with_capacity(n + 8);
    while out.len() < n {
        out.extend_from_slice(&rng.next_u64().to_le_bytes());
    }
    out.truncate(n);
    out
}

/// XOR with the keystream. Self-inverse. Not cryptographically secure.
pub fn xor_crypt(data: &[u8], key: SecretKey) -> Vec<u8> {
    data.iter()
        .zip(keystream(key, data.len()))
        .map(|(d, k)| d ^ k)
        .collect()
}

const CRC16_TABLE: [u16; 256] = crc16_table();

const fn crc16_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ 0x1021
            } else {
                crc << 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, unreflected, xorout 0.
pub fn crc16(data: &[u8]) -> u16 {
    data.iter().fold(0xFFFF, |crc, &b| {
        (crc << 8) ^ CRC16_TABLE[usize::from((crc >> 8) as u8 ^ b)]
    })
}

/// One SMS frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmsSegment {
    msgid: MessageId,
    seq: u8,
    total: u8,
    crc: u16,
    body: String,
    sender: PhoneNumber,
    recipient: PhoneNumber,
}

impl SmsSegment {
    fn new(
        msgid: MessageId,
        seq: u8,
        total: u8,
        body: String,
        sender: PhoneNumber,
        recipient: PhoneNumber,
    ) -> Self {
        assert!(body.len() <= MAX_BODY_LEN, "segment body exceeds {MAX_BODY_LEN}");
        assert!(seq >= 1 && seq <= total && usize::from(total) <= MAX_SEGMENTS);
        let crc = crc16(body.as_bytes());
        Self {
            msgid,
            seq,
            total,
            crc,
            body,
            sender,
            recipient,
        }
    }

    pub fn msgid(&self) -> MessageId {
        self.msgid
    }

    pub fn seq(&self) -> u8 {
        self.seq
    }

    pub fn total(&self) -> u8 {
        self.total
    }

    pub fn crc(&self) -> u16 {
        self.crc
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn sender(&self) -> &PhoneNumber {
        &self.sender
    }

    pub fn recipient(&self) -> &PhoneNumber {
        &self.recipient
    }

    pub fn render(&self) -> String {
        let frame = format!(
            "S|{}|{:02}|{:02}|{:04X}|{}",
            self.msgid, self.seq, self.total, self.crc, self.body
        );
        debug_assert!(frame.len() <= MAX_FRAME_LEN);
        frame
    }

    /// Parses a rendered frame. The checksum is carried as-is; it is
    /// verified by [`reassemble`], not here.
    pub fn parse(
        frame: &str,
        sender: PhoneNumber,
        recipient: PhoneNumber,
    ) -> Result<Self, WireError> {
        let bad = |why: &str| WireError::MalformedFrame(format!("{why}: {frame:?}"));
        if frame.len() > MAX_FRAME_LEN {
            return Err(bad("longer than 160 characters"));
        }
        if !frame.is_ascii() || frame.len() < HEADER_LEN {
            return Err(bad("short or non-ASCII frame"));
        }
        let b = frame.as_bytes();
        if &frame[..2] != "S|" || b[10] != b'|' || b[13] != b'|' || b[16] != b'|' || b[21] != b'|'
        {
            return Err(bad("bad header layout"));
        }
        let msgid: MessageId = frame[2..10].parse().map_err(|_| bad("bad message id"))?;
        let two_digits = |s: &str| -> Result<u8, WireError> {
            if s.bytes().all(|c| c.is_ascii_digit()) {
                Ok(s.parse().expect("two digits"))
            } else {
                Err(bad("non-decimal seq/total"))
            }
        };
        let seq = two_digits(&frame[11..13])?;
        let total = two_digits(&frame[14..16])?;
        if seq == 0 || total == 0 || seq > total {
            return Err(bad("seq/total out of range"));
        }
        let crc_text = &frame[17..21];
        if !crc_text.bytes().all(is_upper_hex) {
            return Err(bad("bad checksum field"));
        }
        let crc = u16::from_str_radix(crc_text, 16).expect("validated hex");
        let body = &frame[HEADER_LEN..];
        if !body.bytes().all(is_upper_hex) {
            return Err(bad("non-hex body"));
        }
        Ok(Self {
            msgid,
            seq,
            total,
            crc,
            body: body.to_owned(),
            sender,
            recipient,
        })
    }
}

/// Splits an uppercase-hex payload into frames of at most 138 body chars.
pub fn segment(
    msgid: MessageId,
    hex_payload: &str,
    sender: &PhoneNumber,
    recipient: &PhoneNumber,
) -> Result<Vec<SmsSegment>, WireError> {
    if let Some(ch) = hex_payload.chars().find(|c| !c.is_ascii() || !is_upper_hex(*c as u8)) {
        return Err(WireError::IllegalCharacter {
            field: "hex payload",
            ch,
        });
    }
    let total = hex_payload.len().div_ceil(MAX_BODY_LEN).max(1);
    if total > MAX_SEGMENTS {
        return Err(WireError::PayloadTooLarge {
            len: hex_payload.len(),
        });
    }
    let total = total as u8;
    let chunks: Vec<&str> = if hex_payload.is_empty() {
        vec![""]
    } else {
        hex_payload
            .as_bytes()
            .chunks(MAX_BODY_LEN)
            .map(|c| std::str::from_utf8(c).expect("ASCII"))
            .collect()
    };
    Ok(chunks
        .into_iter()
        .enumerate()
        .map(|(i, body)| {
            SmsSegment::new(
                msgid,
                i as u8 + 1,
                total,
                body.to_owned(),
                sender.clone(),
                recipient.clone(),
            )
        })
        .collect())
}

/// Rebuilds the hex payload from an unordered, possibly duplicated set of
/// segments belonging to one message.
pub fn reassemble<'a, I>(segments: I) -> Result<String, WireError>
where
    I: IntoIterator<Item = &'a SmsSegment>,
{
    let mut total: Option<u8> = None;
    let mut msgid: Option<MessageId> = None;
    let mut by_seq: BTreeMap<u8, &SmsSegment> = BTreeMap::new();
    for seg in segments {
        match msgid {
            Some(m) if m != seg.msgid => {
                return Err(WireError::Inconsistent(format!(
                    "mixed message ids {m} and {}",
                    seg.msgid
                )))
            }
            _ => msgid = Some(seg.msgid),
        }
        match total {
            Some(t) if t != seg.total => {
                return Err(WireError::Inconsistent(format!(
                    "conflicting totals {t} and {}",
                    seg.total
                )))
            }
            _ => total = Some(seg.total),
        }
        if let Some(prev) = by_seq.insert(seg.seq, seg) {
            if prev.body != seg.body || prev.crc != seg.crc {
                return Err(WireError::Inconsistent(format!(
                    "conflicting bodies for segment {}",
                    seg.seq
                )));
            }
        }
    }
    let Some(total) = total else {
        return Err(WireError::Incomplete {
            missing: 1,
            total: 1,
        });
    };
    for seg in by_seq.values() {
        if crc16(seg.body.as_bytes()) != seg.crc {
            return Err(WireError::ChecksumMismatch { seq: seg.seq });
        }
    }
    if let Some(missing) = (1..=total).find(|s| !by_seq.contains_key(s)) {
        return Err(WireError::Incomplete { missing, total });
    }
    Ok(by_seq.values().map(|s| s.body.as_str()).collect())
}

/// Encode, encrypt, hex and segment a message in one step.
pub fn pack(
    msg: &LogicalMessage,
    key: SecretKey,
    sender: &PhoneNumber,
    recipient: &PhoneNumber,
) -> Result<Vec<SmsSegment>, WireError> {
    let text = encode_message(msg)?;
    let cipher = xor_crypt(text.as_bytes(), key);
    segment(msg.id(), &hex::encode_upper(cipher), sender, recipient)
}

/// Inverse of [`pack`].
pub fn unpack<'a, I>(segments: I, key: SecretKey) -> Result<LogicalMessage, WireError>
where
    I: IntoIterator<Item = &'a SmsSegment>,
{
    let payload = reassemble(segments)?;
    let cipher = hex::decode(&payload).map_err(|e| WireError::Malformed(e.to_string()))?;
    let plain = xor_crypt(&cipher, key);
    let text = String::from_utf8(plain)
        .map_err(|_| WireError::Malformed("decrypted payload is not text".into()))?;
    decode_message(&text)
}
