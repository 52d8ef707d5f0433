//! Length-prefixed frames for the socket transport.
//!
//! ```text
//! [0x47 0x51][msg_type: u8][round: u32 LE][payload_len: u32 LE][payload]
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 2] = [0x47, 0x51];
pub const HEADER_LEN: usize = 11;
pub const MAX_PAYLOAD: u32 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Norm = 1,
    Dense = 2,
    Sparse = 3,
    Exp = 4,
    Ctrl = 5,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => MsgType::Norm,
            2 => MsgType::Dense,
            3 => MsgType::Sparse,
            4 => MsgType::Exp,
            5 => MsgType::Ctrl,
            _ => return Err(Error::Protocol(format!("unknown message type {v}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub round: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, round: u32, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            round,
            payload,
        }
    }

    pub fn header(&self) -> Result<[u8; HEADER_LEN]> {
        let len = u32::try_from(self.payload.len())
            .ok()
            .filter(|&l| l <= MAX_PAYLOAD)
            .ok_or_else(|| Error::Protocol(format!("payload of {} bytes too large", self.payload.len())))?;
        let mut h = [0u8; HEADER_LEN];
        h[..2].copy_from_slice(&MAGIC);
        h[2] = self.msg_type as u8;
        h[3..7].copy_from_slice(&self.round.to_le_bytes());
        h[7..11].copy_from_slice(&len.to_le_bytes());
        Ok(h)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.header()?);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Check that this is the frame the receiver expects.
    pub fn expect(&self, msg_type: MsgType, round: u32) -> Result<()> {
        if self.msg_type != msg_type || self.round != round {
            return Err(Error::Protocol(format!(
                "expected {msg_type:?} for round {round}, got {:?} for round {}",
                self.msg_type, self.round
            )));
        }
        Ok(())
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<()> {
    w.write_all(&frame.header()?)?;
    w.write_all(&frame.payload)?;
    w.flush()?;
    Ok(())
}

/// Read one frame; `Ok(None)` on a clean end of stream before a header.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>> {
    let mut h = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut h[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("stream ended inside a frame header".into())),
            Ok(k) => got += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    if h[..2] != MAGIC {
        return Err(Error::Protocol(format!("bad magic {:02x}{:02x}", h[0], h[1])));
    }
    let msg_type = MsgType::from_u8(h[2])?;
    let round = u32::from_le_bytes(h[3..7].try_into().unwrap());
    let len = u32::from_le_bytes(h[7..11].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(Some(Frame {
        msg_type,
        round,
        payload,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout() {
        let f = Frame::new(MsgType::Exp, 0x01020304, vec![9, 8, 7]);
        let b = f.encode().unwrap();
        assert_eq!(b, vec![0x47, 0x51, 4, 4, 3, 2, 1, 3, 0, 0, 0, 9, 8, 7]);
        let mut cur = std::io::Cursor::new(b);
        assert_eq!(read_frame(&mut cur).unwrap(), Some(f));
        assert_eq!(read_frame(&mut cur).unwrap(), None);
    }

    #[test]
    fn rejects_garbage() {
        let mut bad = Frame::new(MsgType::Norm, 1, vec![]).encode().unwrap();
        bad[0] = 0;
        assert!(matches!(read_frame(&mut bad.as_slice()), Err(Error::Protocol(_))));
        let mut bad = Frame::new(MsgType::Norm, 1, vec![]).encode().unwrap();
        bad[2] = 9;
        assert!(matches!(read_frame(&mut bad.as_slice()), Err(Error::Protocol(_))));
        let short = Frame::new(MsgType::Norm, 1, vec![1, 2]).encode().unwrap();
        assert!(read_frame(&mut &short[..12]).is_err());
        assert!(read_frame(&mut &short[..5]).is_err());
    }

    #[test]
    fn expect_checks_type_and_round() {
        let f = Frame::new(MsgType::Dense, 3, vec![]);
        assert!(f.expect(MsgType::Dense, 3).is_ok());
        assert!(f.expect(MsgType::Dense, 4).is_err());
        assert!(f.expect(MsgType::Exp, 3).is_err());
    }
}
