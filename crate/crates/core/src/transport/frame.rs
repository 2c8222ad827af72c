//! Fixed-layout little-endian frames.
//!
//! Belief frame, 52 bytes:
//!
//! | bytes  | field                         |
//! |--------|-------------------------------|
//! | 0..4   | magic `"GBPL"`                |
//! | 4      | version (1)                   |
//! | 5      | kind (0 = belief, 1 = ack)    |
//! | 6..8   | sender id, `u16`              |
//! | 8..12  | iteration, `u32`              |
//! | 12..52 | `mu_x, mu_y, P_xx, P_xy, P_yy` as `f64` |
//!
//! Ack frames carry only the 12-byte header. Anchor beliefs are sent with an
//! all-zero covariance, which is how the decoder recognizes them.

use nalgebra::{Matrix2, Vector2};
use thiserror::Error;

use crate::bp::GaussianBelief;
use crate::network::NodeId;

pub const MAGIC: [u8; 4] = *b"GBPL";
pub const VERSION: u8 = 1;
pub const KIND_BELIEF: u8 = 0;
pub const KIND_ACK: u8 = 1;
pub const HEADER_LEN: usize = 12;
pub const BELIEF_FRAME_LEN: usize = 52;
pub const ACK_FRAME_LEN: usize = HEADER_LEN;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("truncated frame: {len} bytes")]
    TruncatedFrame { len: usize },
    #[error("frame has {len} bytes, expected {expected}")]
    TrailingBytes { len: usize, expected: usize },
    #[error("non-finite {0} field")]
    NonFiniteField(&'static str),
    #[error("sender id {0} does not fit in 16 bits")]
    SenderIdOverflow(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Frame {
    Belief {
        sender: NodeId,
        iteration: u32,
        belief: GaussianBelief,
    },
    Ack {
        sender: NodeId,
        iteration: u32,
    },
}

fn header(kind: u8, sender: NodeId, iteration: u32) -> Result<[u8; HEADER_LEN], FrameError> {
    let sender = u16::try_from(sender).map_err(|_| FrameError::SenderIdOverflow(sender))?;
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(&MAGIC);
    h[4] = VERSION;
    h[5] = kind;
    h[6..8].copy_from_slice(&sender.to_le_bytes());
    h[8..12].copy_from_slice(&iteration.to_le_bytes());
    Ok(h)
}

pub fn encode_belief_frame(
    sender: NodeId,
    iteration: u32,
    belief: &GaussianBelief,
) -> Result<[u8; BELIEF_FRAME_LEN], FrameError> {
    let mut out = [0u8; BELIEF_FRAME_LEN];
    out[..HEADER_LEN].copy_from_slice(&header(KIND_BELIEF, sender, iteration)?);
    let cov = if belief.is_anchor {
        Matrix2::zeros()
    } else {
        belief.covariance
    };
    let fields = [belief.mean.x, belief.mean.y, cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]];
    for (k, v) in fields.iter().enumerate() {
        let at = HEADER_LEN + 8 * k;
        out[at..at + 8].copy_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_ack_frame(sender: NodeId, iteration: u32) -> Result<[u8; ACK_FRAME_LEN], FrameError> {
    header(KIND_ACK, sender, iteration)
}

fn read_f64(bytes: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"))
}

/// Decodes either frame kind.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FrameError> {
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::TruncatedFrame { len: bytes.len() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4-byte slice");
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(FrameError::UnsupportedVersion(bytes[4]));
    }
    let kind = bytes[5];
    let sender = u16::from_le_bytes([bytes[6], bytes[7]]) as NodeId;
    let iteration = u32::from_le_bytes(bytes[8..12].try_into().expect("4-byte slice"));
    let expected = match kind {
        KIND_BELIEF => BELIEF_FRAME_LEN,
        KIND_ACK => ACK_FRAME_LEN,
        other => return Err(FrameError::UnknownKind(other)),
    };
    if bytes.len() < expected {
        return Err(FrameError::TruncatedFrame { len: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(FrameError::TrailingBytes {
            len: bytes.len(),
            expected,
        });
    }
    if kind == KIND_ACK {
        return Ok(Frame::Ack { sender, iteration });
    }

    const NAMES: [&str; 5] = ["mu_x", "mu_y", "P_xx", "P_xy", "P_yy"];
    let mut f = [0.0; 5];
    for (k, slot) in f.iter_mut().enumerate() {
        *slot = read_f64(bytes, HEADER_LEN + 8 * k);
        if !slot.is_finite() {
            return Err(FrameError::NonFiniteField(NAMES[k]));
        }
    }
    let mean = Vector2::new(f[0], f[1]);
    let covariance = Matrix2::new(f[2], f[3], f[3], f[4]);
    let belief = if covariance == Matrix2::zeros() {
        GaussianBelief {
            mean,
            covariance,
            is_anchor: true,
        }
    } else {
        GaussianBelief::new(mean, covariance)
    };
    Ok(Frame::Belief {
        sender,
        iteration,
        belief,
    })
}

/// Decodes a belief frame, rejecting acks.
pub fn decode_belief_frame(bytes: &[u8]) -> Result<(NodeId, u32, GaussianBelief), FrameError> {
    match decode_frame(bytes)? {
        Frame::Belief {
            sender,
            iteration,
            belief,
        } => Ok((sender, iteration, belief)),
        Frame::Ack { .. } => Err(FrameError::UnknownKind(KIND_ACK)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Position;
    use proptest::prelude::*;

    #[test]
    fn identity_covariance_layout() {
        let b = GaussianBelief::new(Vector2::zeros(), Matrix2::identity());
        let f = encode_belief_frame(3, 7, &b).unwrap();
        assert_eq!(f.len(), 52);
        assert_eq!(&f[0..4], b"GBPL");
        assert_eq!(f[4], 1);
        assert_eq!(f[5], 0);
        assert_eq!(&f[6..8], &[3, 0]);
        assert_eq!(&f[8..12], &[7, 0, 0, 0]);
        assert_eq!(&f[12..20], &[0u8; 8]);
        assert_eq!(&f[20..28], &[0u8; 8]);
        // 1.0f64 = 0x3FF0000000000000
        assert_eq!(&f[28..36], &[0, 0, 0, 0, 0, 0, 0xF0, 0x3F]);
        assert_eq!(&f[36..44], &[0u8; 8]);
        assert_eq!(&f[44..52], &[0, 0, 0, 0, 0, 0, 0xF0, 0x3F]);
    }

    #[test]
    fn anchor_round_trip() {
        let a = GaussianBelief::anchor(Position::new(0.0, 0.0));
        let f = encode_belief_frame(0, 1, &a).unwrap();
        assert_eq!(&f[28..52], &[0u8; 24]);
        let (_, _, back) = decode_belief_frame(&f).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn rejects_malformed_frames() {
        let b = GaussianBelief::new(Vector2::new(1.0, 2.0), Matrix2::identity());
        let good = encode_belief_frame(1, 1, &b).unwrap();

        let mut bad_magic = good;
        bad_magic[0] = b'X';
        assert!(matches!(decode_belief_frame(&bad_magic), Err(FrameError::BadMagic(_))));

        let mut bad_version = good;
        bad_version[4] = 2;
        assert_eq!(decode_belief_frame(&bad_version), Err(FrameError::UnsupportedVersion(2)));

        let mut bad_kind = good;
        bad_kind[5] = 9;
        assert_eq!(decode_belief_frame(&bad_kind), Err(FrameError::UnknownKind(9)));

        assert_eq!(decode_belief_frame(&good[..51]), Err(FrameError::TruncatedFrame { len: 51 }));
        assert_eq!(decode_belief_frame(&good[..5]), Err(FrameError::TruncatedFrame { len: 5 }));

        let mut long = good.to_vec();
        long.push(0);
        assert!(matches!(decode_belief_frame(&long), Err(FrameError::TrailingBytes { .. })));

        let mut nan = good;
        nan[12..20].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(decode_belief_frame(&nan), Err(FrameError::NonFiniteField("mu_x")));
    }

    #[test]
    fn sender_overflow() {
        let b = GaussianBelief::new(Vector2::zeros(), Matrix2::identity());
        assert_eq!(encode_belief_frame(70_000, 0, &b), Err(FrameError::SenderIdOverflow(70_000)));
        assert!(encode_belief_frame(65_535, 0, &b).is_ok());
    }

    #[test]
    fn ack_frames() {
        let f = encode_ack_frame(12, 99).unwrap();
        assert_eq!(f.len(), 12);
        assert_eq!(decode_frame(&f).unwrap(), Frame::Ack { sender: 12, iteration: 99 });
        assert_eq!(decode_belief_frame(&f), Err(FrameError::UnknownKind(KIND_ACK)));
    }

    proptest! {
        #[test]
        fn belief_round_trip(
            sender in 0usize..65_536,
            iteration in any::<u32>(),
            mx in -1e6f64..1e6,
            my in -1e6f64..1e6,
            a in 1e-6f64..1e6,
            c in 1e-6f64..1e6,
            rho in -0.99f64..0.99,
        ) {
            let cxy = rho * (a * c).sqrt();
            let b = GaussianBelief::new(Vector2::new(mx, my), Matrix2::new(a, cxy, cxy, c));
            let f = encode_belief_frame(sender, iteration, &b).unwrap();
            prop_assert_eq!(f.len(), BELIEF_FRAME_LEN);
            let (s, it, back) = decode_belief_frame(&f).unwrap();
            prop_assert_eq!(s, sender);
            prop_assert_eq!(it, iteration);
            prop_assert_eq!(back, b);
        }
    }
}
