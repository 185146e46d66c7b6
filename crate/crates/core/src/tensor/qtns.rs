//! QTNS: `"QTNS"`, version byte, dtype code, rank, rank × u32-LE dims,
//! then the row-major little-endian payload.

use std::io::{Read, Write};

use super::{DType, Tensor, TensorData, MAX_RANK};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QTNS";
pub const VERSION: u8 = 0x01;

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes).map_err(|source| Error::Io {
            offset: self.written,
            source,
        })?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

/// Serializes `t` and returns the number of bytes written.
pub fn write_tensor<W: Write>(t: &Tensor, sink: W) -> Result<u64> {
    let mut out = CountingWriter {
        inner: sink,
        written: 0,
    };
    let mut header = Vec::with_capacity(7 + 4 * t.rank());
    header.extend_from_slice(MAGIC);
    header.push(VERSION);
    header.push(t.dtype().code());
    header.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::shape(format!("dimension {d} exceeds u32")))?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    out.put(&header)?;

    // Chunked so huge tensors don't need a second full-size buffer.
    const CHUNK: usize = 1 << 14;
    let mut buf = Vec::with_capacity(CHUNK * 4);
    match t.data() {
        TensorData::F32(v) => {
            for chunk in v.chunks(CHUNK) {
                buf.clear();
                chunk
                    .iter()
                    .for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                out.put(&buf)?;
            }
        }
        TensorData::U8(v) => {
            for chunk in v.chunks(CHUNK) {
                out.put(chunk)?;
            }
        }
        TensorData::U16(v) => {
            for chunk in v.chunks(CHUNK) {
                buf.clear();
                chunk
                    .iter()
                    .for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                out.put(&buf)?;
            }
        }
    }
    out.inner.flush().map_err(|source| Error::Io {
        offset: out.written,
        source,
    })?;
    Ok(out.written)
}

/// Reads as many bytes as available up to `buf.len()`; returns the count.
fn read_full<R: Read>(source: &mut R, buf: &mut [u8], offset: u64) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(source) => {
                return Err(Error::Io {
                    offset: offset + filled as u64,
                    source,
                })
            }
        }
    }
    Ok(filled)
}

fn read_exact_or<R: Read>(source: &mut R, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    let n = read_full(source, buf, offset)?;
    if n < buf.len() {
        return Err(Error::Format(format!(
            "stream ended inside {what} ({n} of {} bytes)",
            buf.len()
        )));
    }
    Ok(())
}

/// Parses one QTNS tensor from `source`.
pub fn read_tensor<R: Read>(mut source: R) -> Result<Tensor> {
    let mut head = [0u8; 7];
    let n = read_full(&mut source, &mut head, 0)?;
    if n < 4 || &head[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected \"QTNS\"".into()));
    }
    if n < head.len() {
        return Err(Error::Format("stream ended inside header".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", head[4])));
    }
    let dtype = DType::from_code(head[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", head[5])))?;
    let rank = head[6] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let mut dims_raw = vec![0u8; 4 * rank];
    read_exact_or(&mut source, &mut dims_raw, 7, "dimension list")?;
    let shape: Vec<usize> = dims_raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::Format(format!("zero dimension in {shape:?}")));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let expected = count
        .checked_mul(dtype.size_of())
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;

    let header_len = 7 + 4 * rank as u64;
    // Read incrementally so a lying header cannot force a huge allocation.
    let mut payload = Vec::new();
    let mut chunk = vec![0u8; 1 << 16];
    while payload.len() < expected {
        let want = (expected - payload.len()).min(chunk.len());
        let got = read_full(&mut source, &mut chunk[..want], header_len + payload.len() as u64)?;
        payload.extend_from_slice(&chunk[..got]);
        if got < want {
            return Err(Error::Truncation {
                expected: expected as u64,
                actual: payload.len() as u64,
            });
        }
    }

    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::U8 => TensorData::U8(payload),
        DType::U16 => TensorData::U16(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        ),
    };
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f32_2x2_layout() {
        let t = Tensor::from_f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        let n = write_tensor(&t, &mut buf).unwrap();
        assert_eq!(n, 31);
        assert_eq!(buf.len(), 31);
        assert_eq!(&buf[..7], &[b'Q', b'T', b'N', b'S', 1, 0, 2]);
        assert_eq!(&buf[7..15], &[2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&buf[15..19], &1.0f32.to_le_bytes());
        assert_eq!(read_tensor(&buf[..]).unwrap(), t);
    }

    #[test]
    fn u16_little_endian_tail() {
        let t = Tensor::from_u16(vec![1], vec![255]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        assert_eq!(&buf[buf.len() - 2..], &[0xFF, 0x00]);
    }

    #[test]
    fn bad_magic() {
        let err = read_tensor(&b"XXXX\x01\x00\x01\x01\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn truncated_payload_reports_counts() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"QTNS\x01\x00\x01");
        buf.extend_from_slice(&10u32.to_le_bytes());
        buf.extend_from_slice(&[0u8; 16]);
        match read_tensor(&buf[..]).unwrap_err() {
            Error::Truncation { expected, actual } => {
                assert_eq!((expected, actual), (40, 16));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    struct FailAfter(usize);

    impl Write for FailAfter {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            if self.0 == 0 {
                return Err(std::io::Error::other("disk full"));
            }
            let n = buf.len().min(self.0);
            self.0 -= n;
            Ok(n)
        }

        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn sink_failure_reports_offset() {
        let t = Tensor::from_f32(vec![4], vec![0.0; 4]).unwrap();
        match write_tensor(&t, FailAfter(11)).unwrap_err() {
            Error::Io { offset, .. } => assert_eq!(offset, 11),
            e => panic!("unexpected {e:?}"),
        }
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..5, 1..=5).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            let s1 = shape.clone();
            let s2 = shape.clone();
            prop_oneof![
                prop::collection::vec(any::<u32>(), n)
                    .prop_map(move |bits| Tensor::from_f32(
                        s1.clone(),
                        bits.into_iter().map(f32::from_bits).collect()
                    )
                    .unwrap()),
                prop::collection::vec(any::<u8>(), n)
                    .prop_map(move |v| Tensor::from_u8(s2.clone(), v).unwrap()),
                prop::collection::vec(any::<u16>(), n)
                    .prop_map(move |v| Tensor::from_u16(shape.clone(), v).unwrap()),
            ]
        })
    }

    fn bits(t: &Tensor) -> Vec<u32> {
        match t.data() {
            TensorData::F32(v) => v.iter().map(|x| x.to_bits()).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as u32).collect(),
            TensorData::U16(v) => v.iter().map(|&x| x as u32).collect(),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn round_trip_is_bit_exact(t in arb_tensor()) {
            let mut buf = Vec::new();
            let n = write_tensor(&t, &mut buf).unwrap();
            prop_assert_eq!(n as usize, buf.len());
            let back = read_tensor(&buf[..]).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.dtype(), t.dtype());
            prop_assert_eq!(bits(&back), bits(&t));
            let mut again = Vec::new();
            write_tensor(&back, &mut again).unwrap();
            prop_assert_eq!(again, buf);
        }
    }
}
