use super::*;

pub fn encode(datagram: &Datagram) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + MEASUREMENT_PAYLOAD_LEN + CRC_LEN);
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    buf.push(datagram.body.kind() as u8);
    buf.extend_from_slice(datagram.meter_id.as_bytes());
    match &datagram.body {
        Body::Measurement(m) => {
            buf.extend_from_slice(&m.seq.to_be_bytes());
            buf.extend_from_slice(&m.timestamp_ms.to_be_bytes());
            buf.extend_from_slice(&m.v_rms_mv.to_be_bytes());
            buf.extend_from_slice(&m.i_rms_ma.to_be_bytes());
            buf.extend_from_slice(&m.phi_urad.to_be_bytes());
            buf.extend_from_slice(&m.p_mw.to_be_bytes());
            buf.extend_from_slice(&m.q_mvar.to_be_bytes());
            buf.extend_from_slice(&m.s_mva.to_be_bytes());
            buf.extend_from_slice(&m.energy_mj.to_be_bytes());
            buf.push(u8::from(m.relay_closed) | (u8::from(m.sleeping) << 1));
        }
        Body::Command(c) => {
            buf.push(c.opcode as u8);
            buf.extend_from_slice(&c.argument.to_be_bytes());
            buf.extend_from_slice(&c.command_id.to_be_bytes());
        }
        Body::Ack(a) => {
            buf.extend_from_slice(&a.command_id.to_be_bytes());
            if let AckStatus::Rejected(reason) = a.status {
                buf.push(reason as u8);
            }
        }
        Body::TimeSyncRequest { request_sent_ms } => {
            buf.extend_from_slice(&request_sent_ms.to_be_bytes());
        }
        Body::TimeSyncReply {
            request_sent_ms,
            coordinator_time_ms,
        } => {
            buf.extend_from_slice(&request_sent_ms.to_be_bytes());
            buf.extend_from_slice(&coordinator_time_ms.to_be_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_be_bytes());
    debug_assert!(buf.len() <= MAX_DATAGRAM_LEN);
    buf
}

/// Bounds-checked big-endian reader over a payload slice.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Offset of `buf` within the whole datagram, for error reporting.
    base: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let end = self.pos + N;
        let bytes = self.buf.get(self.pos..end).ok_or(DecodeError::Truncated {
            needed: self.base + end + CRC_LEN,
            got: self.base + self.buf.len() + CRC_LEN,
        })?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice has length N"))
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        self.take().map(u32::from_be_bytes)
    }

    fn i32(&mut self) -> Result<i32, DecodeError> {
        self.take().map(i32::from_be_bytes)
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        self.take().map(u64::from_be_bytes)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn finish(self) -> Result<(), DecodeError> {
        if self.remaining() != 0 {
            return Err(DecodeError::Malformed("trailing bytes after payload"));
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Datagram, DecodeError> {
    let min = HEADER_LEN + CRC_LEN;
    if bytes.len() < min {
        return Err(DecodeError::Truncated {
            needed: min,
            got: bytes.len(),
        });
    }
    if bytes.len() > MAX_DATAGRAM_LEN {
        return Err(DecodeError::Oversize(bytes.len()));
    }
    let (body, crc) = bytes.split_at(bytes.len() - CRC_LEN);
    let carried = u32::from_be_bytes(crc.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if carried != computed {
        return Err(DecodeError::CrcMismatch { carried, computed });
    }
    if body[..2] != MAGIC {
        return Err(DecodeError::BadMagic([body[0], body[1]]));
    }
    if body[2] != VERSION {
        return Err(DecodeError::UnsupportedVersion(body[2]));
    }
    let kind = Kind::from_byte(body[3]).ok_or(DecodeError::UnknownKind(body[3]))?;
    let meter_id = MeterId::new(body[4..HEADER_LEN].try_into().expect("8 bytes"));

    let mut r = Reader {
        buf: &body[HEADER_LEN..],
        pos: 0,
        base: HEADER_LEN,
    };
    let body = match kind {
        Kind::Measurement => {
            let m = MeasurementPayload {
                seq: r.u32()?,
                timestamp_ms: r.u64()?,
                v_rms_mv: r.u32()?,
                i_rms_ma: r.u32()?,
                phi_urad: r.i32()?,
                p_mw: r.i32()?,
                q_mvar: r.i32()?,
                s_mva: r.u32()?,
                energy_mj: r.u64()?,
                relay_closed: false,
                sleeping: false,
            };
            let flags = r.u8()?;
            if flags & !0b11 != 0 {
                return Err(DecodeError::Malformed("reserved flag bits set"));
            }
            Body::Measurement(MeasurementPayload {
                relay_closed: flags & 0b01 != 0,
                sleeping: flags & 0b10 != 0,
                ..m
            })
        }
        Kind::Command => {
            let op = r.u8()?;
            let argument = r.u32()?;
            let command_id = r.u32()?;
            let opcode = Opcode::from_byte(op).ok_or(DecodeError::UnknownOpcode(op))?;
            if opcode != Opcode::SetFs && argument != 0 {
                return Err(DecodeError::Malformed("non-zero argument on argumentless command"));
            }
            Body::Command(CommandFrame {
                opcode,
                argument,
                command_id,
            })
        }
        Kind::Ack => {
            let command_id = r.u32()?;
            let status = if r.remaining() > 0 {
                let code = r.u8()?;
                let reason = RejectReason::from_byte(code)
                    .ok_or(DecodeError::Malformed("unknown ack reject reason"))?;
                AckStatus::Rejected(reason)
            } else {
                AckStatus::Accepted
            };
            Body::Ack(Ack { command_id, status })
        }
        Kind::TimeSyncRequest => Body::TimeSyncRequest {
            request_sent_ms: r.u64()?,
        },
        Kind::TimeSyncReply => Body::TimeSyncReply {
            request_sent_ms: r.u64()?,
            coordinator_time_ms: r.u64()?,
        },
    };
    r.finish()?;
    Ok(Datagram { meter_id, body })
}
