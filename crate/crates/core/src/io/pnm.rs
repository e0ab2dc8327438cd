//! Binary PNM readers (P5/P6, 8-bit) and float map writers: PFM (grayscale
//! `Pf`, little-endian via scale -1.0, bottom-up rows) plus 16-bit P5 PGM.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor4;

fn read_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    // skip whitespace and `#` comments
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Image("unexpected end of header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Read a binary P5 (grayscale) or P6 (RGB) image with maxval 255, scaled to
/// the unit interval. ASCII variants and other depths are rejected.
pub fn read_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor4<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let magic = read_token(&bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        "P2" | "P3" => {
            return Err(Error::Image(format!("ASCII variant {magic} rejected")));
        }
        other => return Err(Error::Image(format!("not a binary PNM: {other}"))),
    };
    let w: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Image("bad width".into()))?;
    let h: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Image("bad height".into()))?;
    let maxval: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Image("bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Image(format!("maxval {maxval} != 255 rejected")));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(Error::Image("truncated pixel data".into()));
    }
    let inv = lit::<T>(1.0 / 255.0);
    let mut t = Tensor4::zeros([1, channels, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                let v = bytes[pos + (y * w + x) * channels + c];
                t.set(0, c, y, x, lit::<T>(v as f64) * inv);
            }
        }
    }
    Ok(t)
}

/// Write a single-channel map as grayscale PFM: `Pf`, dims, scale -1.0
/// (little-endian), rows bottom-up.
pub fn write_pfm<T: Scalar>(path: impl AsRef<Path>, map: &Tensor4<T>) -> Result<()> {
    let [n, c, h, w] = map.dims();
    if n != 1 || c != 1 {
        return Err(Error::Image(format!("PFM writer needs (1,1,h,w), got {:?}", map.dims())));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "Pf\n{} {}\n-1.0\n", w, h)?;
    for y in (0..h).rev() {
        for x in 0..w {
            f.write_all(&map.at(0, 0, y, x).to_f32().unwrap().to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a grayscale PFM written by `write_pfm` (or any little-endian `Pf`).
pub fn read_pfm<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor4<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let magic = read_token(&bytes, &mut pos)?;
    if magic != "Pf" {
        return Err(Error::Image(format!("not a grayscale PFM: {magic}")));
    }
    let w: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Image("bad width".into()))?;
    let h: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Image("bad height".into()))?;
    let scale: f64 = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Image("bad scale".into()))?;
    if scale >= 0.0 {
        return Err(Error::Image("big-endian PFM not supported".into()));
    }
    pos += 1;
    if bytes.len() < pos + w * h * 4 {
        return Err(Error::Image("truncated PFM data".into()));
    }
    let mut t = Tensor4::zeros([1, 1, h, w]);
    for row in 0..h {
        let y = h - 1 - row; // bottom-up storage
        for x in 0..w {
            let off = pos + (row * w + x) * 4;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            t.set(0, 0, y, x, lit::<T>(v as f64));
        }
    }
    Ok(t)
}

/// Write a 16-bit P5 PGM with values multiplied by `scale` and clamped to
/// the u16 range (big-endian samples per the format).
pub fn write_pgm16<T: Scalar>(path: impl AsRef<Path>, map: &Tensor4<T>, scale: f64) -> Result<()> {
    let [n, c, h, w] = map.dims();
    if n != 1 || c != 1 {
        return Err(Error::Image(format!("PGM writer needs (1,1,h,w), got {:?}", map.dims())));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n65535\n", w, h)?;
    for y in 0..h {
        for x in 0..w {
            let v = (map.at(0, 0, y, x).to_f64().unwrap() * scale).clamp(0.0, 65535.0) as u16;
            f.write_all(&v.to_be_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("smalldepth-pnm-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn p5_values_scale_to_unit_range() {
        let path = tmp("gray.pgm");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(b"P5\n2 2\n255\n").unwrap();
        f.write_all(&[0u8, 255, 128, 64]).unwrap();
        drop(f);
        let t: Tensor4<f32> = read_image(&path).unwrap();
        assert_eq!(t.dims(), [1, 1, 2, 2]);
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 0, 1), 1.0);
        assert_eq!(t.at(0, 0, 1, 0), 128.0 / 255.0);
        assert_eq!(t.at(0, 0, 1, 1), 64.0 / 255.0);
    }

    #[test]
    fn p6_channel_order_is_rgb() {
        let path = tmp("stripe.ppm");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(b"P6\n3 1\n255\n").unwrap();
        // red, green, blue pixels
        f.write_all(&[255, 0, 0, 0, 255, 0, 0, 0, 255]).unwrap();
        drop(f);
        let t: Tensor4<f64> = read_image(&path).unwrap();
        assert_eq!(t.dims(), [1, 3, 1, 3]);
        for (x, c) in [(0usize, 0usize), (1, 1), (2, 2)] {
            for ch in 0..3 {
                let want = if ch == c { 1.0 } else { 0.0 };
                assert_eq!(t.at(0, ch, 0, x), want, "x={x} ch={ch}");
            }
        }
    }

    #[test]
    fn rejects_ascii_and_odd_maxval() {
        let path = tmp("ascii.pgm");
        std::fs::write(&path, b"P2\n1 1\n255\n7\n").unwrap();
        assert!(read_image::<f32>(&path).is_err());
        let path = tmp("max.pgm");
        std::fs::write(&path, b"P5\n1 1\n127\n\x05").unwrap();
        assert!(read_image::<f32>(&path).is_err());
    }

    #[test]
    fn pfm_round_trip_close() {
        let map = Tensor4::<f32>::from_fn([1, 1, 3, 4], |_, _, h, w| 0.01 + (h * 4 + w) as f32 * 0.37);
        let path = tmp("d.pfm");
        write_pfm(&path, &map).unwrap();
        let back: Tensor4<f32> = read_pfm(&path).unwrap();
        assert_eq!(back.dims(), map.dims());
        for (a, b) in back.data().iter().zip(map.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pgm16_header_and_scaling() {
        let map = Tensor4::<f32>::new([1, 1, 1, 2], vec![0.5, 2.0]).unwrap();
        let path = tmp("d16.pgm");
        write_pgm16(&path, &map, 1000.0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 1\n65535\n"));
        let data = &bytes[bytes.len() - 4..];
        assert_eq!(u16::from_be_bytes([data[0], data[1]]), 500);
        assert_eq!(u16::from_be_bytes([data[2], data[3]]), 2000);
    }
}
