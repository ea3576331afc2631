//! Minimal PNG writer: 8-bit grayscale or RGB, stored (uncompressed)
//! deflate blocks inside a valid zlib stream, correct CRCs.

use crate::tensor::Tensor;
use crate::{Error, Result};
use std::path::Path;

const SIGNATURE: [u8; 8] = [137, 80, 78, 71, 13, 10, 26, 10];

fn crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    for (n, slot) in table.iter_mut().enumerate() {
        let mut c = n as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 {
                0xedb8_8320 ^ (c >> 1)
            } else {
                c >> 1
            };
        }
        *slot = c;
    }
    table
}

fn crc32(data: &[u8]) -> u32 {
    let table = crc_table();
    let mut c = 0xffff_ffffu32;
    for &b in data {
        c = table[((c ^ b as u32) & 0xff) as usize] ^ (c >> 8);
    }
    c ^ 0xffff_ffff
}

fn adler32(data: &[u8]) -> u32 {
    const MOD: u32 = 65521;
    let (mut a, mut b) = (1u32, 0u32);
    for &byte in data {
        a = (a + byte as u32) % MOD;
        b = (b + a) % MOD;
    }
    (b << 16) | a
}

fn chunk(out: &mut Vec<u8>, kind: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(kind);
    out.extend_from_slice(payload);
    let mut crc_input = kind.to_vec();
    crc_input.extend_from_slice(payload);
    out.extend_from_slice(&crc32(&crc_input).to_be_bytes());
}

/// Raw scanlines wrapped in a zlib stream of stored deflate blocks.
fn zlib_stored(raw: &[u8]) -> Vec<u8> {
    let mut out = vec![0x78, 0x01];
    let mut rest = raw;
    loop {
        let take = rest.len().min(65535);
        let (block, tail) = rest.split_at(take);
        let last = tail.is_empty();
        out.push(if last { 1 } else { 0 });
        out.extend_from_slice(&(take as u16).to_le_bytes());
        out.extend_from_slice(&(!(take as u16)).to_le_bytes());
        out.extend_from_slice(block);
        if last {
            break;
        }
        rest = tail;
    }
    out.extend_from_slice(&adler32(raw).to_be_bytes());
    out
}

/// Encodes an image tensor [C,H,W] (C = 1 grayscale or 3 RGB) with values
/// in [0,1]; v maps to round(255 v).
pub fn png_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 || !(shape[0] == 1 || shape[0] == 3) {
        return Err(Error::InvalidArgument {
            op: "encode_png",
            msg: format!("expected [1|3,H,W], got {shape:?}"),
        });
    }
    if let Some(&bad) = image
        .data()
        .iter()
        .find(|v| **v < 0.0 || **v > 1.0 || !v.is_finite())
    {
        return Err(Error::Domain {
            op: "encode_png",
            msg: format!("pixel {bad} outside [0,1]"),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::new();
    out.extend_from_slice(&SIGNATURE);

    let mut ihdr = Vec::new();
    ihdr.extend_from_slice(&(w as u32).to_be_bytes());
    ihdr.extend_from_slice(&(h as u32).to_be_bytes());
    ihdr.push(8); // bit depth
    ihdr.push(if c == 1 { 0 } else { 2 }); // grayscale or truecolor
    ihdr.extend_from_slice(&[0, 0, 0]); // compression, filter, interlace
    chunk(&mut out, b"IHDR", &ihdr);

    // filter byte 0 per scanline, channels interleaved per pixel
    let mut raw = Vec::with_capacity(h * (1 + w * c));
    for row in 0..h {
        raw.push(0);
        for col in 0..w {
            for ch in 0..c {
                let v = image.data()[(ch * h + row) * w + col];
                raw.push((v * 255.0).round() as u8);
            }
        }
    }
    chunk(&mut out, b"IDAT", &zlib_stored(&raw));
    chunk(&mut out, b"IEND", &[]);
    Ok(out)
}

pub fn encode_png(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = png_bytes(image)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Real;

    #[test]
    fn extreme_values_map_to_byte_endpoints() {
        let zero = Tensor::zeros(&[1, 2, 2]);
        let bytes = png_bytes(&zero).unwrap();
        let img = image::load_from_memory(&bytes).unwrap().to_luma8();
        assert!(img.pixels().all(|p| p.0[0] == 0x00));

        let one = Tensor::full(&[1, 2, 2], 1.0);
        let bytes = png_bytes(&one).unwrap();
        let img = image::load_from_memory(&bytes).unwrap().to_luma8();
        assert!(img.pixels().all(|p| p.0[0] == 0xff));
    }

    #[test]
    fn round_trips_through_independent_decoder() {
        let mut rng = crate::rng::Rng::seed_from(5);
        let mut t = Tensor::zeros(&[1, 70, 41]);
        for v in t.data_mut() {
            *v = rng.uniform() as Real;
        }
        let bytes = png_bytes(&t).unwrap();
        let img = image::load_from_memory(&bytes).unwrap().to_luma8();
        assert_eq!(img.width(), 41);
        assert_eq!(img.height(), 70);
        for row in 0..70u32 {
            for col in 0..41u32 {
                let expect = (t.data()[(row * 41 + col) as usize] * 255.0).round() as u8;
                assert_eq!(img.get_pixel(col, row).0[0], expect);
            }
        }
    }

    #[test]
    fn rgb_round_trip() {
        let mut rng = crate::rng::Rng::seed_from(6);
        let mut t = Tensor::zeros(&[3, 9, 13]);
        for v in t.data_mut() {
            *v = rng.uniform() as Real;
        }
        let bytes = png_bytes(&t).unwrap();
        let img = image::load_from_memory(&bytes).unwrap().to_rgb8();
        for row in 0..9u32 {
            for col in 0..13u32 {
                let px = img.get_pixel(col, row).0;
                for ch in 0..3 {
                    let expect =
                        (t.data()[(ch * 9 + row as usize) * 13 + col as usize] * 255.0).round() as u8;
                    assert_eq!(px[ch], expect);
                }
            }
        }
    }

    #[test]
    fn large_image_spans_multiple_deflate_blocks() {
        // > 65535 raw bytes forces several stored blocks
        let t = Tensor::full(&[1, 300, 300], 0.25);
        let bytes = png_bytes(&t).unwrap();
        let img = image::load_from_memory(&bytes).unwrap().to_luma8();
        assert_eq!(img.get_pixel(299, 299).0[0], 64);
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        let t = Tensor::full(&[1, 2, 2], 1.5);
        assert!(png_bytes(&t).is_err());
        let t2 = Tensor::full(&[2, 2, 2], 0.5);
        assert!(png_bytes(&t2).is_err());
    }
}
