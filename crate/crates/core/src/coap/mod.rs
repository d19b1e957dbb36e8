//! RFC 7252 message subset: 4-byte header, token, delta-encoded options
//! with up to the 1-byte extended form, and an optional payload.

mod transport;

use std::fmt;

pub use transport::{
    CoapLink, InProcessLink, RetransmitPolicy, TransportError, UdpLink, UdpServer,
};

pub const VERSION: u8 = 1;
pub const PAYLOAD_MARKER: u8 = 0xFF;
pub const MAX_TOKEN_LEN: usize = 8;
/// Largest delta or length expressible with the 1-byte extended form.
pub const MAX_EXTENDED: usize = 13 + 255;

pub const OPTION_URI_PATH: u16 = 11;
pub const OPTION_CONTENT_FORMAT: u16 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageType {
    Confirmable = 0,
    NonConfirmable = 1,
    Acknowledgement = 2,
    Reset = 3,
}

impl MessageType {
    fn from_bits(b: u8) -> Self {
        match b & 0b11 {
            0 => MessageType::Confirmable,
            1 => MessageType::NonConfirmable,
            2 => MessageType::Acknowledgement,
            _ => MessageType::Reset,
        }
    }
}

/// Request method or response code, `class.detail` packed as `ccc ddddd`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Code(pub u8);

impl Code {
    pub const EMPTY: Code = Code::new(0, 0);
    pub const GET: Code = Code::new(0, 1);
    pub const POST: Code = Code::new(0, 2);
    pub const PUT: Code = Code::new(0, 3);
    pub const CHANGED: Code = Code::new(2, 4);
    pub const CONTENT: Code = Code::new(2, 5);
    pub const BAD_REQUEST: Code = Code::new(4, 0);
    pub const FORBIDDEN: Code = Code::new(4, 3);
    pub const NOT_FOUND: Code = Code::new(4, 4);
    pub const METHOD_NOT_ALLOWED: Code = Code::new(4, 5);
    pub const INTERNAL_SERVER_ERROR: Code = Code::new(5, 0);

    pub const fn new(class: u8, detail: u8) -> Self {
        Code((class << 5) | (detail & 0x1F))
    }

    pub fn class(self) -> u8 {
        self.0 >> 5
    }

    pub fn detail(self) -> u8 {
        self.0 & 0x1F
    }

    pub fn is_success(self) -> bool {
        self.class() == 2
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.class(), self.detail())
    }
}

impl fmt::Debug for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Code({self})")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoapOption {
    pub number: u16,
    pub value: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoapMessage {
    pub mtype: MessageType,
    pub code: Code,
    pub message_id: u16,
    pub token: Vec<u8>,
    /// Kept sorted by option number; repeated numbers keep insertion order.
    pub options: Vec<CoapOption>,
    pub payload: Vec<u8>,
}

impl CoapMessage {
    pub fn new(mtype: MessageType, code: Code, message_id: u16) -> Self {
        Self {
            mtype,
            code,
            message_id,
            token: Vec::new(),
            options: Vec::new(),
            payload: Vec::new(),
        }
    }

    pub fn with_token(mut self, token: impl Into<Vec<u8>>) -> Self {
        self.token = token.into();
        self
    }

    pub fn with_payload(mut self, payload: impl Into<Vec<u8>>) -> Self {
        self.payload = payload.into();
        self
    }

    pub fn add_option(&mut self, number: u16, value: impl Into<Vec<u8>>) {
        let at = self.options.partition_point(|o| o.number <= number);
        self.options.insert(
            at,
            CoapOption {
                number,
                value: value.into(),
            },
        );
    }

    pub fn with_uri_path<S: AsRef<str>>(mut self, segments: &[S]) -> Self {
        for s in segments {
            self.add_option(OPTION_URI_PATH, s.as_ref().as_bytes());
        }
        self
    }

    pub fn with_content_format(mut self, format: u16) -> Self {
        let bytes = format.to_be_bytes();
        // uint option encoding drops leading zero bytes
        let trimmed: Vec<u8> = bytes.iter().copied().skip_while(|b| *b == 0).collect();
        self.add_option(OPTION_CONTENT_FORMAT, trimmed);
        self
    }

    /// Uri-Path segments, or `None` if a segment is not UTF-8.
    pub fn uri_path(&self) -> Option<Vec<String>> {
        self.options
            .iter()
            .filter(|o| o.number == OPTION_URI_PATH)
            .map(|o| String::from_utf8(o.value.clone()).ok())
            .collect()
    }

    /// Piggybacked response matching this request's id and token.
    pub fn ack(&self, code: Code) -> CoapMessage {
        CoapMessage::new(MessageType::Acknowledgement, code, self.message_id)
            .with_token(self.token.clone())
    }

    pub fn reset(message_id: u16) -> CoapMessage {
        CoapMessage::new(MessageType::Reset, Code::EMPTY, message_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("token of {0} bytes exceeds 8")]
    TokenTooLong(usize),
    #[error("option value of {0} bytes exceeds the supported length")]
    OptionTooLong(usize),
    #[error("option delta {0} exceeds the supported range")]
    OptionDeltaTooLarge(usize),
    #[error("message truncated")]
    Truncated,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("reserved token length {0}")]
    ReservedTkl(u8),
    #[error("payload marker not followed by payload")]
    PayloadMarkerWithoutPayload,
    #[error("reserved option nibble 15")]
    ReservedOptionNibble,
    #[error("2-byte extended option fields are not supported")]
    UnsupportedExtendedForm,
}

fn nibble_for(v: usize) -> Result<(u8, Option<u8>), ()> {
    match v {
        0..=12 => Ok((v as u8, None)),
        13..=MAX_EXTENDED => Ok((13, Some((v - 13) as u8))),
        _ => Err(()),
    }
}

pub fn encode(msg: &CoapMessage) -> Result<Vec<u8>, CodecError> {
    if msg.token.len() > MAX_TOKEN_LEN {
        return Err(CodecError::TokenTooLong(msg.token.len()));
    }
    let mut out = Vec::with_capacity(4 + msg.token.len() + msg.payload.len() + 16);
    out.push((VERSION << 6) | ((msg.mtype as u8) << 4) | msg.token.len() as u8);
    out.push(msg.code.0);
    out.extend_from_slice(&msg.message_id.to_be_bytes());
    out.extend_from_slice(&msg.token);

    let mut opts: Vec<&CoapOption> = msg.options.iter().collect();
    opts.sort_by_key(|o| o.number);
    let mut last = 0u16;
    for opt in opts {
        let delta = (opt.number - last) as usize;
        let (dn, dx) =
            nibble_for(delta).map_err(|_| CodecError::OptionDeltaTooLarge(delta))?;
        let (ln, lx) = nibble_for(opt.value.len())
            .map_err(|_| CodecError::OptionTooLong(opt.value.len()))?;
        out.push((dn << 4) | ln);
        out.extend(dx);
        out.extend(lx);
        out.extend_from_slice(&opt.value);
        last = opt.number;
    }
    if !msg.payload.is_empty() {
        out.push(PAYLOAD_MARKER);
        out.extend_from_slice(&msg.payload);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<CoapMessage, CodecError> {
    if bytes.len() < 4 {
        return Err(CodecError::Truncated);
    }
    let version = bytes[0] >> 6;
    if version != VERSION {
        return Err(CodecError::BadVersion(version));
    }
    let mtype = MessageType::from_bits(bytes[0] >> 4);
    let tkl = bytes[0] & 0x0F;
    if tkl > 8 {
        return Err(CodecError::ReservedTkl(tkl));
    }
    let code = Code(bytes[1]);
    let message_id = u16::from_be_bytes([bytes[2], bytes[3]]);
    let mut pos = 4;
    let token = bytes
        .get(pos..pos + tkl as usize)
        .ok_or(CodecError::Truncated)?
        .to_vec();
    pos += tkl as usize;

    let mut options = Vec::new();
    let mut number = 0usize;
    let mut payload = Vec::new();
    while pos < bytes.len() {
        let head = bytes[pos];
        pos += 1;
        if head == PAYLOAD_MARKER {
            if pos == bytes.len() {
                return Err(CodecError::PayloadMarkerWithoutPayload);
            }
            payload = bytes[pos..].to_vec();
            break;
        }
        let delta = read_extended(head >> 4, bytes, &mut pos)?;
        let len = read_extended(head & 0x0F, bytes, &mut pos)?;
        number += delta;
        let value = bytes.get(pos..pos + len).ok_or(CodecError::Truncated)?.to_vec();
        pos += len;
        let number = u16::try_from(number).map_err(|_| CodecError::OptionDeltaTooLarge(number))?;
        options.push(CoapOption { number, value });
    }
    Ok(CoapMessage {
        mtype,
        code,
        message_id,
        token,
        options,
        payload,
    })
}

fn read_extended(nibble: u8, bytes: &[u8], pos: &mut usize) -> Result<usize, CodecError> {
    match nibble {
        0..=12 => Ok(nibble as usize),
        13 => {
            let b = *bytes.get(*pos).ok_or(CodecError::Truncated)?;
            *pos += 1;
            Ok(13 + b as usize)
        }
        14 => Err(CodecError::UnsupportedExtendedForm),
        _ => Err(CodecError::ReservedOptionNibble),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn get_execute() -> CoapMessage {
        CoapMessage::new(MessageType::Confirmable, Code::GET, 0x1234).with_uri_path(&["execute"])
    }

    #[test]
    fn get_vector_is_byte_exact() {
        // 0x40: ver 1, CON, TKL 0 | 0x01 GET | id | 0xB7: delta 11, len 7 | "execute"
        let expected = [
            0x40, 0x01, 0x12, 0x34, 0xB7, 0x65, 0x78, 0x65, 0x63, 0x75, 0x74, 0x65,
        ];
        assert_eq!(encode(&get_execute()).unwrap(), expected);
        assert_eq!(decode(&expected).unwrap(), get_execute());
    }

    #[test]
    fn empty_ack_vector_is_byte_exact() {
        let ack = CoapMessage::new(MessageType::Acknowledgement, Code::CHANGED, 0);
        assert_eq!(encode(&ack).unwrap(), [0x60, 0x44, 0x00, 0x00]);
        assert_eq!(Code::CHANGED.0, 0x44);
        assert_eq!(Code::CHANGED.to_string(), "2.04");
    }

    #[test]
    fn header_errors() {
        assert_eq!(decode(&[0x40, 0x01, 0x00]), Err(CodecError::Truncated));
        assert_eq!(decode(&[0x80, 0x01, 0, 0]), Err(CodecError::BadVersion(2)));
        assert_eq!(decode(&[0x49, 0x01, 0, 0]), Err(CodecError::ReservedTkl(9)));
        assert_eq!(decode(&[0x42, 0x01, 0, 0, 1]), Err(CodecError::Truncated));
        assert_eq!(
            decode(&[0x40, 0x01, 0, 0, 0xFF]),
            Err(CodecError::PayloadMarkerWithoutPayload)
        );
    }

    #[test]
    fn option_errors() {
        // delta nibble 15 without being the marker
        assert_eq!(decode(&[0x40, 1, 0, 0, 0xF1, 0]), Err(CodecError::ReservedOptionNibble));
        assert_eq!(decode(&[0x40, 1, 0, 0, 0xE1, 0, 0, 0]), Err(CodecError::UnsupportedExtendedForm));
        assert_eq!(decode(&[0x40, 1, 0, 0, 0x13]), Err(CodecError::Truncated));
        assert_eq!(decode(&[0x40, 1, 0, 0, 0xD1]), Err(CodecError::Truncated));
    }

    #[test]
    fn encoder_limits() {
        let msg = CoapMessage::new(MessageType::Confirmable, Code::GET, 1).with_token(vec![0; 9]);
        assert_eq!(encode(&msg), Err(CodecError::TokenTooLong(9)));
        let mut msg = CoapMessage::new(MessageType::Confirmable, Code::GET, 1);
        msg.add_option(OPTION_URI_PATH, vec![b'a'; 269]);
        assert_eq!(encode(&msg), Err(CodecError::OptionTooLong(269)));
        let mut msg = CoapMessage::new(MessageType::Confirmable, Code::GET, 1);
        msg.add_option(300, vec![]);
        assert_eq!(encode(&msg), Err(CodecError::OptionDeltaTooLarge(300)));
    }

    #[test]
    fn extended_length_round_trips() {
        let mut msg = CoapMessage::new(MessageType::NonConfirmable, Code::PUT, 9)
            .with_token(vec![1, 2, 3])
            .with_payload(b"x".to_vec());
        msg.add_option(OPTION_URI_PATH, vec![b'a'; 268]);
        msg.add_option(200, vec![b'b'; 13]);
        let bytes = encode(&msg).unwrap();
        assert_eq!(decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn uri_path_and_content_format() {
        let msg = CoapMessage::new(MessageType::Confirmable, Code::PUT, 2)
            .with_content_format(42)
            .with_uri_path(&["device", "sensor-1", "config"]);
        assert_eq!(msg.options[0].number, OPTION_URI_PATH);
        assert_eq!(msg.options.last().unwrap().number, OPTION_CONTENT_FORMAT);
        assert_eq!(
            msg.uri_path().unwrap(),
            vec!["device".to_string(), "sensor-1".into(), "config".into()]
        );
        let decoded = decode(&encode(&msg).unwrap()).unwrap();
        assert_eq!(decoded, msg);
    }
}
