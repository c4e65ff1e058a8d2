//! Network/transport headers carried inside radio frame payloads.
//!
//! Both header kinds are padded with zeros to the configured overhead size so
//! that frame lengths follow the overhead table exactly. The first byte is
//! the IPv6 next-header value of the transport (17 for datagrams, 6 for
//! streams).

use super::MediumError;

pub const PROTO_DATAGRAM: u8 = 17;
pub const PROTO_STREAM: u8 = 6;

/// Bytes the datagram header actually uses before padding.
pub const DATAGRAM_HEADER_MIN: usize = 7;
/// Bytes the stream header actually uses before padding.
pub const STREAM_HEADER_MIN: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatagramHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub length: u16,
}

impl DatagramHeader {
    pub fn write(&self, size: usize, out: &mut Vec<u8>) {
        debug_assert!(size >= DATAGRAM_HEADER_MIN);
        let start = out.len();
        out.push(PROTO_DATAGRAM);
        out.extend_from_slice(&self.src_port.to_be_bytes());
        out.extend_from_slice(&self.dst_port.to_be_bytes());
        out.extend_from_slice(&self.length.to_be_bytes());
        out.resize(start + size, 0);
    }

    pub fn read(buf: &[u8], size: usize) -> Result<(Self, &[u8]), MediumError> {
        if buf.len() < size || size < DATAGRAM_HEADER_MIN || buf[0] != PROTO_DATAGRAM {
            return Err(MediumError::MalformedHeader);
        }
        let header = DatagramHeader {
            src_port: u16::from_be_bytes([buf[1], buf[2]]),
            dst_port: u16::from_be_bytes([buf[3], buf[4]]),
            length: u16::from_be_bytes([buf[5], buf[6]]),
        };
        let body = &buf[size..];
        if body.len() != header.length as usize {
            return Err(MediumError::MalformedHeader);
        }
        Ok((header, body))
    }
}

pub mod flags {
    pub const SYN: u8 = 0x01;
    pub const ACK: u8 = 0x02;
    pub const FIN: u8 = 0x04;
    pub const PSH: u8 = 0x08;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: u8,
}

impl SegmentHeader {
    pub fn write(&self, size: usize, out: &mut Vec<u8>) {
        debug_assert!(size >= STREAM_HEADER_MIN);
        let start = out.len();
        out.push(PROTO_STREAM);
        out.extend_from_slice(&self.src_port.to_be_bytes());
        out.extend_from_slice(&self.dst_port.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.ack.to_be_bytes());
        out.push(self.flags);
        out.resize(start + size, 0);
    }

    pub fn read(buf: &[u8], size: usize) -> Result<(Self, &[u8]), MediumError> {
        if buf.len() < size || size < STREAM_HEADER_MIN || buf[0] != PROTO_STREAM {
            return Err(MediumError::MalformedHeader);
        }
        let u32_at = |i: usize| u32::from_be_bytes([buf[i], buf[i + 1], buf[i + 2], buf[i + 3]]);
        let header = SegmentHeader {
            src_port: u16::from_be_bytes([buf[1], buf[2]]),
            dst_port: u16::from_be_bytes([buf[3], buf[4]]),
            seq: u32_at(5),
            ack: u32_at(9),
            flags: buf[13],
        };
        Ok((header, &buf[size..]))
    }

    pub fn kind(&self) -> SegmentKind {
        use flags::*;
        match self.flags {
            f if f & SYN != 0 && f & ACK != 0 => SegmentKind::SynAck,
            f if f & SYN != 0 => SegmentKind::Syn,
            f if f & FIN != 0 => SegmentKind::Fin,
            f if f & PSH != 0 => SegmentKind::Data,
            _ => SegmentKind::Ack,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    Syn,
    SynAck,
    Ack,
    Data,
    Fin,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn segment_header_roundtrip(src in any::<u16>(), dst in any::<u16>(), seq in any::<u32>(), ack in any::<u32>(), fl in 0u8..16, data in prop::collection::vec(any::<u8>(), 0..40)) {
            let h = SegmentHeader { src_port: src, dst_port: dst, seq, ack, flags: fl };
            let mut buf = Vec::new();
            h.write(41, &mut buf);
            prop_assert_eq!(buf.len(), 41);
            buf.extend_from_slice(&data);
            let (back, body) = SegmentHeader::read(&buf, 41).unwrap();
            prop_assert_eq!(back, h);
            prop_assert_eq!(body, &data[..]);
        }
    }

    #[test]
    fn datagram_header_checks_length() {
        let h = DatagramHeader {
            src_port: 1,
            dst_port: 2,
            length: 3,
        };
        let mut buf = Vec::new();
        h.write(21, &mut buf);
        buf.extend_from_slice(b"abc");
        assert_eq!(DatagramHeader::read(&buf, 21).unwrap(), (h, &b"abc"[..]));
        buf.push(0);
        assert!(DatagramHeader::read(&buf, 21).is_err());
        assert!(SegmentHeader::read(&buf, 21).is_err());
    }
}
