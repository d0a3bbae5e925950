use std::fmt;

use serde::{Deserialize, Serialize};

use super::FabricError;

/// 12-bit magic `0xFD5`, packed with a 4-bit version into the first u16.
pub const FRAME_MAGIC: u16 = 0xFD5;
pub const FRAME_VERSION: u8 = 1;
pub const FRAME_HEADER_LEN: usize = 11;
pub const DEFAULT_MAX_FRAME: usize = 4 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    ModelExchange,
    RendezvousNotice,
    AuthRequest,
    AuthResponse,
    MetricsReport,
    Control,
}

impl FrameKind {
    pub const ALL: [FrameKind; 6] = [
        FrameKind::ModelExchange,
        FrameKind::RendezvousNotice,
        FrameKind::AuthRequest,
        FrameKind::AuthResponse,
        FrameKind::MetricsReport,
        FrameKind::Control,
    ];

    pub fn code(self) -> u8 {
        match self {
            FrameKind::ModelExchange => 1,
            FrameKind::RendezvousNotice => 2,
            FrameKind::AuthRequest => 3,
            FrameKind::AuthResponse => 4,
            FrameKind::MetricsReport => 5,
            FrameKind::Control => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    /// Everything except model payloads counts towards control overhead.
    pub fn is_control(self) -> bool {
        self != FrameKind::ModelExchange
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FrameKind::ModelExchange => "model_exchange",
            FrameKind::RendezvousNotice => "rendezvous_notice",
            FrameKind::AuthRequest => "auth_request",
            FrameKind::AuthResponse => "auth_response",
            FrameKind::MetricsReport => "metrics_report",
            FrameKind::Control => "control",
        }
    }
}

impl fmt::Display for FrameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub correlation_id: u32,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameKind, correlation_id: u32, body: Vec<u8>) -> Self {
        Frame {
            kind,
            correlation_id,
            body,
        }
    }

    pub fn wire_len(&self) -> usize {
        FRAME_HEADER_LEN + self.body.len()
    }

    pub fn check_size(&self, max_frame: usize) -> Result<(), FabricError> {
        if self.body.len() > max_frame {
            return Err(FabricError::FrameTooLarge {
                len: self.body.len(),
                max: max_frame,
            });
        }
        Ok(())
    }

    pub fn encode_header(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut h = [0u8; FRAME_HEADER_LEN];
        let tag = (FRAME_MAGIC << 4) | FRAME_VERSION as u16;
        h[..2].copy_from_slice(&tag.to_be_bytes());
        h[2] = self.kind.code();
        h[3..7].copy_from_slice(&self.correlation_id.to_be_bytes());
        h[7..11].copy_from_slice(&(self.body.len() as u32).to_be_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.encode_header());
        out.extend_from_slice(&self.body);
        out
    }

    /// Parses a header, returning `(kind, correlation_id, body_len)`.
    pub fn decode_header(
        h: &[u8; FRAME_HEADER_LEN],
        max_frame: usize,
    ) -> Result<(FrameKind, u32, usize), FabricError> {
        let tag = u16::from_be_bytes([h[0], h[1]]);
        if tag >> 4 != FRAME_MAGIC {
            return Err(FabricError::Malformed("bad frame magic".into()));
        }
        if (tag & 0xF) as u8 != FRAME_VERSION {
            return Err(FabricError::Malformed(format!(
                "unsupported frame version {}",
                tag & 0xF
            )));
        }
        let kind = FrameKind::from_code(h[2])
            .ok_or_else(|| FabricError::Malformed(format!("unknown frame kind {}", h[2])))?;
        let corr = u32::from_be_bytes([h[3], h[4], h[5], h[6]]);
        let len = u32::from_be_bytes([h[7], h[8], h[9], h[10]]) as usize;
        if len > max_frame {
            return Err(FabricError::FrameTooLarge {
                len,
                max: max_frame,
            });
        }
        Ok((kind, corr, len))
    }

    pub fn decode(bytes: &[u8], max_frame: usize) -> Result<Self, FabricError> {
        if bytes.len() < FRAME_HEADER_LEN {
            return Err(FabricError::Malformed("truncated frame header".into()));
        }
        let header: [u8; FRAME_HEADER_LEN] = bytes[..FRAME_HEADER_LEN].try_into().expect("len");
        let (kind, correlation_id, len) = Self::decode_header(&header, max_frame)?;
        let body = &bytes[FRAME_HEADER_LEN..];
        if body.len() != len {
            return Err(FabricError::Malformed(format!(
                "frame declares {len} body bytes, found {}",
                body.len()
            )));
        }
        Ok(Frame::new(kind, correlation_id, body.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let f = Frame::new(FrameKind::MetricsReport, 0xA1B2C3D4, vec![9; 3]);
        let wire = f.encode();
        assert_eq!(&wire[..2], &[0xFD, 0x51]);
        assert_eq!(wire[2], 5);
        assert_eq!(&wire[3..7], &[0xA1, 0xB2, 0xC3, 0xD4]);
        assert_eq!(&wire[7..11], &[0, 0, 0, 3]);
        assert_eq!(wire.len(), f.wire_len());
        assert_eq!(Frame::decode(&wire, 16).unwrap(), f);
    }

    #[test]
    fn every_kind_round_trips() {
        for kind in FrameKind::ALL {
            let f = Frame::new(kind, 7, b"x".to_vec());
            assert_eq!(Frame::decode(&f.encode(), 8).unwrap().kind, kind);
        }
        assert!(!FrameKind::ModelExchange.is_control());
        assert!(FrameKind::RendezvousNotice.is_control());
    }

    #[test]
    fn oversize_and_bad_magic() {
        let f = Frame::new(FrameKind::Control, 0, vec![0; 10]);
        assert!(matches!(
            f.check_size(9),
            Err(FabricError::FrameTooLarge { len: 10, max: 9 })
        ));
        assert!(Frame::decode(&f.encode(), 9).is_err());
        let mut wire = f.encode();
        wire[0] = 0;
        assert!(Frame::decode(&wire, 64).is_err());
    }
}
