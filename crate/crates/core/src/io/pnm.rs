use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn malformed(what: &'static str, offset: usize, reason: impl Into<String>) -> Error {
    Error::Malformed {
        what,
        offset,
        reason: reason.into(),
    }
}

fn parse_header(buf: &[u8], magic: &[u8; 2], what: &'static str) -> Result<Header> {
    if buf.len() < 2 || &buf[..2] != magic {
        return Err(malformed(
            what,
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match buf.get(pos) {
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(
                what,
                pos,
                format!("expected header field {}", i + 1),
            ));
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| malformed(what, start, "header number out of range"))?;
    }
    if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed(what, pos, "expected whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(malformed(what, 2, "zero image extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(malformed(
            what,
            pos,
            format!("maxval {maxval} outside 1..=65535"),
        ));
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Binary P6 to a `[3, H, W]` tensor in [0, 1].
pub fn read_ppm(buf: &[u8]) -> Result<Tensor> {
    let h = parse_header(buf, b"P6", "ppm")?;
    let bps = if h.maxval < 256 { 1 } else { 2 };
    let plane = h.width * h.height;
    let need = plane * 3 * bps;
    let have = buf.len() - h.data_start;
    if have < need {
        return Err(malformed(
            "ppm",
            buf.len(),
            format!("pixel data truncated ({have} of {need} bytes)"),
        ));
    }
    let px = &buf[h.data_start..h.data_start + need];
    let mut out = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let k = (i * 3 + c) * bps;
            let v = if bps == 1 {
                px[k] as usize
            } else {
                (px[k] as usize) << 8 | px[k + 1] as usize
            };
            if v > h.maxval {
                return Err(malformed("ppm", h.data_start + k, "sample exceeds maxval"));
            }
            out[c * plane + i] = v as f64 / h.maxval as f64;
        }
    }
    Tensor::new(&[3, h.height, h.width], out)
}

fn quantise(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, H, W]` in [0, 1] to 8-bit P6.
pub fn write_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = img.dims3("write_ppm")?;
    if c != 3 {
        return Err(Error::ShapeMismatch {
            op: "write_ppm",
            dim: "channels",
            expected: 3,
            got: c,
        });
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(quantise(d[ch * h * w + i]));
        }
    }
    Ok(out)
}

/// `[H, W]` map to 8-bit P5, min-max normalised (a constant map writes zeros).
pub fn write_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = match map.shape() {
        &[h, w] => [h, w],
        s => {
            return Err(Error::Rank {
                op: "write_pgm",
                expected: 2,
                got: s.len(),
            })
        }
    };
    map.ensure_finite("write_pgm")?;
    let d = map.data();
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(d.iter().map(|&v| {
        if span > 0.0 {
            quantise((v - lo) / span)
        } else {
            0
        }
    }));
    Ok(out)
}

/// Channel mean of a `[C, H, W]` or `[1, C, H, W]` feature as a P5 image.
pub fn feature_map_to_pgm(feature: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match feature.shape() {
        &[1, c, h, w] | &[c, h, w] => (c, h, w),
        s => {
            return Err(Error::Rank {
                op: "feature_map_to_pgm",
                expected: 3,
                got: s.len(),
            })
        }
    };
    let d = feature.data();
    let mean = (0..h * w)
        .map(|i| (0..c).map(|ch| d[ch * h * w + i]).sum::<f64>() / c as f64)
        .collect();
    write_pgm(&Tensor::new(&[h, w], mean)?)
}
