//! 8-bit binary portable graymap (P5) and pixmap (P6) rasters.

use crate::autodiff::Tensor;
use crate::error::FormatError;

type Result<T> = std::result::Result<T, FormatError>;

/// Encodes a `[1, H, W]` tensor as P5 or a `[3, H, W]` tensor as P6; values are clamped to [0, 1].
pub fn encode_pnm(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match t.shape() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        s => return Err(FormatError::Corrupt(format!("cannot store shape {s:?} as a graymap or pixmap"))),
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = t.data();
    for i in 0..h * w {
        for ch in 0..c {
            out.push((d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

fn header_token(buf: &[u8], at: &mut usize) -> Result<String> {
    loop {
        while *at < buf.len() && buf[*at].is_ascii_whitespace() {
            *at += 1;
        }
        if *at < buf.len() && buf[*at] == b'#' {
            while *at < buf.len() && buf[*at] != b'\n' {
                *at += 1;
            }
        } else {
            break;
        }
    }
    let start = *at;
    while *at < buf.len() && !buf[*at].is_ascii_whitespace() {
        *at += 1;
    }
    if start == *at {
        return Err(FormatError::Corrupt("truncated raster header".into()));
    }
    Ok(String::from_utf8_lossy(&buf[start..*at]).into_owned())
}

fn header_number(buf: &[u8], at: &mut usize) -> Result<usize> {
    let tok = header_token(buf, at)?;
    tok.parse()
        .map_err(|_| FormatError::Corrupt(format!("bad raster header field {tok:?}")))
}

/// Decodes P5/P6 with maxval 255 into a `[C, H, W]` tensor with values in [0, 1].
pub fn decode_pnm(buf: &[u8]) -> Result<Tensor> {
    let mut at = 0;
    let channels = match header_token(buf, &mut at)?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(FormatError::Corrupt(format!("unsupported raster type {m:?}"))),
    };
    let w = header_number(buf, &mut at)?;
    let h = header_number(buf, &mut at)?;
    let maxval = header_number(buf, &mut at)?;
    if maxval != 255 {
        return Err(FormatError::Corrupt(format!("unsupported maxval {maxval}")));
    }
    at += 1;
    let n = w * h * channels;
    if buf.len() < at + n {
        return Err(FormatError::Corrupt("truncated raster data".into()));
    }
    if buf.len() > at + n {
        return Err(FormatError::Corrupt("trailing raster data".into()));
    }
    let px = &buf[at..];
    let mut data = vec![0.0; n];
    for i in 0..w * h {
        for ch in 0..channels {
            data[ch * w * h + i] = f64::from(px[i * channels + ch]) / 255.0;
        }
    }
    Ok(Tensor::new(vec![channels, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip() {
        let vals: Vec<f64> = (0..12).map(|k| (k * 20) as f64 / 255.0).collect();
        let t = Tensor::new(vec![1, 3, 4], vals).unwrap();
        let bytes = encode_pnm(&t).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(decode_pnm(&bytes).unwrap(), t);
    }

    #[test]
    fn color_round_trip_and_comments() {
        let vals: Vec<f64> = (0..18).map(|k| (k * 13) as f64 / 255.0).collect();
        let t = Tensor::new(vec![3, 2, 3], vals).unwrap();
        let bytes = encode_pnm(&t).unwrap();
        assert_eq!(decode_pnm(&bytes).unwrap(), t);
        let mut commented = b"P6\n# made by hand\n3 2\n255\n".to_vec();
        commented.extend_from_slice(&bytes[bytes.len() - 18..]);
        assert_eq!(decode_pnm(&commented).unwrap(), t);
    }

    #[test]
    fn rejects_bad_rasters() {
        assert!(decode_pnm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(encode_pnm(&Tensor::zeros(&[2, 2, 2])).is_err());
    }
}
