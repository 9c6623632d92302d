//! Binary PPM/PGM codecs for RGB, 16-bit depth and 8-bit label images.
//!
//! Depth is stored in millimeters (big-endian samples, maxval 65535) with 0
//! marking a hole.

use std::io::Write;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::similarity::DepthMap;
use crate::tensor::Tensor;

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    maxval_offset: usize,
    payload: usize,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(
            0,
            format!(
                "expected magic {:?}",
                std::str::from_utf8(magic).unwrap_or("?")
            ),
        ));
    }
    let mut pos = 2;
    let mut field = |name: &str| -> Result<u32> {
        // Whitespace and `#` comments may precede each field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(start, format!("expected {name}")));
        }
        std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse::<u32>()
            .map_err(|_| format_err(start, format!("{name} out of range")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    let maxval_end = pos;
    let maxval_offset = bytes[..maxval_end]
        .iter()
        .rposition(|b| !b.is_ascii_digit())
        .map_or(0, |i| i + 1);
    if width == 0 || height == 0 {
        return Err(format_err(2, "image has zero size"));
    }
    match bytes.get(maxval_end) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(format_err(maxval_end, "expected whitespace after maxval")),
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval,
        maxval_offset,
        payload: maxval_end + 1,
    })
}

fn payload<'a>(
    bytes: &'a [u8],
    header: &Header,
    sample_bytes: usize,
    channels: usize,
) -> Result<&'a [u8]> {
    let need = header.width * header.height * channels * sample_bytes;
    let available = bytes.len() - header.payload;
    if available < need {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: need {need} bytes, found {available}"),
        ));
    }
    if available > need {
        return Err(format_err(
            header.payload + need,
            "trailing bytes after payload",
        ));
    }
    Ok(&bytes[header.payload..])
}

fn expect_maxval(header: &Header, want: u32) -> Result<()> {
    if header.maxval != want {
        return Err(format_err(
            header.maxval_offset,
            format!("maxval {} unsupported, expected {want}", header.maxval),
        ));
    }
    Ok(())
}

/// Writes a `[3, H, W]` tensor with values in `[0, 1]` as P6.
pub fn write_ppm_rgb<W: Write>(mut out: W, rgb: &Tensor) -> Result<()> {
    let (c, h, w) = rgb.chw()?;
    if c != 3 {
        return Err(Error::shape(format!("rgb image needs 3 channels, has {c}")));
    }
    let plane = h * w;
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.reserve(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            let v = rgb.data()[ch * plane + p];
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("rgb value {v} outside [0, 1]")));
            }
            buf.push((v * 255.0).round() as u8);
        }
    }
    out.write_all(&buf).map_err(|e| Error::Data(e.to_string()))
}

pub fn read_ppm_rgb(bytes: &[u8]) -> Result<Tensor> {
    let header = parse_header(bytes, b"P6")?;
    expect_maxval(&header, 255)?;
    let data = payload(bytes, &header, 1, 3)?;
    let plane = header.width * header.height;
    let mut out = vec![0.0; 3 * plane];
    for (i, &b) in data.iter().enumerate() {
        out[(i % 3) * plane + i / 3] = b as f64 / 255.0;
    }
    Tensor::new(&[3, header.height, header.width], out)
}

/// Millimeter code for a depth in meters; errors if it would collide with
/// the hole marker or overflow 16 bits.
pub(crate) fn depth_to_mm(meters: f64) -> Result<u16> {
    let mm = (meters * 1000.0).round();
    if !(1.0..=65535.0).contains(&mm) {
        return Err(Error::Data(format!(
            "depth {meters} m is not representable in millimeters 1..=65535"
        )));
    }
    Ok(mm as u16)
}

pub fn write_pgm16_depth<W: Write>(mut out: W, depth: &DepthMap) -> Result<()> {
    let (h, w) = depth.dims();
    let mut buf = format!("P5\n{w} {h}\n65535\n").into_bytes();
    buf.reserve(2 * h * w);
    for (&v, &ok) in depth.values().iter().zip(depth.mask()) {
        let mm = if ok { depth_to_mm(v)? } else { 0 };
        buf.extend_from_slice(&mm.to_be_bytes());
    }
    out.write_all(&buf).map_err(|e| Error::Data(e.to_string()))
}

pub fn read_pgm16_depth(bytes: &[u8]) -> Result<DepthMap> {
    let header = parse_header(bytes, b"P5")?;
    expect_maxval(&header, 65535)?;
    let data = payload(bytes, &header, 2, 1)?;
    let (values, valid): (Vec<f64>, Vec<bool>) = data
        .chunks_exact(2)
        .map(|b| {
            let mm = u16::from_be_bytes([b[0], b[1]]);
            (mm as f64 / 1000.0, mm != 0)
        })
        .unzip();
    DepthMap::with_mask(header.height, header.width, values, valid)
}

pub fn write_pgm8_labels<W: Write>(out: W, labels: &LabelMap) -> Result<()> {
    let (h, w) = labels.dims();
    write_pgm8_gray(out, h, w, labels.as_slice())
}

/// Plain 8-bit grayscale, row-major.
pub fn write_pgm8_gray<W: Write>(
    mut out: W,
    height: usize,
    width: usize,
    pixels: &[u8],
) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::shape(format!(
            "{} pixels for a {height}x{width} image",
            pixels.len()
        )));
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    out.write_all(&buf).map_err(|e| Error::Data(e.to_string()))
}

pub fn read_pgm8_labels(bytes: &[u8]) -> Result<LabelMap> {
    let header = parse_header(bytes, b"P5")?;
    expect_maxval(&header, 255)?;
    let data = payload(bytes, &header, 1, 1)?;
    LabelMap::new(header.height, header.width, data.to_vec())
}
