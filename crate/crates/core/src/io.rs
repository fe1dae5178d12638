//! Middlebury-compatible file I/O.
//!
//! Hand-rolled PNM (P2/P3/P5/P6) and PFM codecs: the PFM path must be
//! bit-exact and the PNM path defines the luminance conversion, so neither
//! is delegated. PNG input/output is plumbing and goes through the `image`
//! crate. Calibration files are `key=value` lines.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{DisparityMap, GrayImage, RgbRaster, INVALID_DISPARITY};

/// ITU-R 601 luma weights used for every color-to-gray conversion.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Calibration metadata for one stereo scene.
///
/// Only `ndisp` is mandatory; Middlebury calib files carry many other keys
/// which are ignored. `d_min` is always 0 and `d_max = ndisp - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibInfo {
    pub ndisp: usize,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub im0: Option<String>,
    pub im1: Option<String>,
}

impl CalibInfo {
    pub fn with_ndisp(ndisp: usize) -> Self {
        CalibInfo {
            ndisp,
            width: None,
            height: None,
            im0: None,
            im1: None,
        }
    }

    #[inline]
    pub fn d_max(&self) -> i32 {
        self.ndisp as i32 - 1
    }
}

/// Parse a Middlebury `calib.txt`. Unknown keys are ignored; a missing
/// `ndisp` is a format error.
pub fn parse_calib(path: impl AsRef<Path>) -> Result<CalibInfo> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut info = CalibInfo {
        ndisp: 0,
        width: None,
        height: None,
        im0: None,
        im1: None,
    };
    let mut saw_ndisp = false;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "ndisp" => {
                let n: usize = value
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad ndisp value '{value}'")))?;
                if n < 1 {
                    return Err(Error::format(path, "ndisp must be at least 1"));
                }
                info.ndisp = n;
                saw_ndisp = true;
            }
            "width" => {
                info.width = Some(parse_positive(value, path, "width")?);
            }
            "height" => {
                info.height = Some(parse_positive(value, path, "height")?);
            }
            "im0" => info.im0 = Some(value.to_string()),
            "im1" => info.im1 = Some(value.to_string()),
            _ => {}
        }
    }
    if !saw_ndisp {
        return Err(Error::format(path, "missing required key 'ndisp'"));
    }
    Ok(info)
}

fn parse_positive(value: &str, path: &Path, key: &str) -> Result<usize> {
    let n: usize = value
        .parse()
        .map_err(|_| Error::format(path, format!("bad {key} value '{value}'")))?;
    if n == 0 {
        return Err(Error::format(path, format!("{key} must be positive")));
    }
    Ok(n)
}

/// Read a stereo image into a luminance raster.
///
/// PGM/PPM (binary or ASCII) are parsed directly: samples are scaled by the
/// header maxval into `[0, 1]` and color is collapsed with [`LUMA_WEIGHTS`].
/// A `.png` extension is decoded through the `image` crate with the same
/// conversion.
pub fn read_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
    {
        return read_png(path);
    }
    let bytes = fs::read(path)?;
    decode_pnm(&bytes, path)
}

fn read_png(path: &Path) -> Result<GrayImage> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("png decode failed: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for px in img.pixels() {
        data.push(luma(
            px.0[0] as f64 / 255.0,
            px.0[1] as f64 / 255.0,
            px.0[2] as f64 / 255.0,
        ));
    }
    GrayImage::new(w, h, data)
}

#[inline]
fn luma(r: f64, g: f64, b: f64) -> f64 {
    (LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b).clamp(0.0, 1.0)
}

struct PnmHeader {
    magic: u8,
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

/// Scan a PNM header: magic, then width/height/maxval tokens with
/// `#` comments allowed anywhere in the whitespace.
fn parse_pnm_header(bytes: &[u8], path: &Path) -> Result<PnmHeader> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::format(path, "not a PNM file (missing 'P' magic)"));
    }
    let magic = bytes[1];
    if !matches!(magic, b'2' | b'3' | b'5' | b'6') {
        return Err(Error::format(
            path,
            format!("unsupported PNM type 'P{}'", magic as char),
        ));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        pos = skip_pnm_space(bytes, pos);
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::format(path, "malformed PNM header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|_| Error::format(path, "malformed PNM header"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(path, "PNM dimensions must be positive"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("bad PNM maxval {maxval}")));
    }
    // Binary payload starts after exactly one whitespace byte.
    if matches!(magic, b'5' | b'6') {
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::format(path, "malformed PNM header"));
        }
        pos += 1;
    }
    Ok(PnmHeader {
        magic,
        width: width as usize,
        height: height as usize,
        maxval,
        data_offset: pos,
    })
}

fn skip_pnm_space(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn decode_pnm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let header = parse_pnm_header(bytes, path)?;
    let channels = if matches!(header.magic, b'3' | b'6') {
        3
    } else {
        1
    };
    let n_samples = header.width * header.height * channels;
    let samples = match header.magic {
        b'2' | b'3' => read_ascii_samples(&bytes[header.data_offset..], n_samples, path)?,
        _ => read_binary_samples(
            &bytes[header.data_offset..],
            n_samples,
            header.maxval,
            path,
        )?,
    };
    let maxval = header.maxval as f64;
    let mut data = Vec::with_capacity(header.width * header.height);
    if channels == 1 {
        for s in samples {
            if s > header.maxval {
                return Err(Error::format(path, "sample exceeds maxval"));
            }
            data.push(s as f64 / maxval);
        }
    } else {
        for rgb in samples.chunks_exact(3) {
            if rgb.iter().any(|s| *s > header.maxval) {
                return Err(Error::format(path, "sample exceeds maxval"));
            }
            data.push(luma(
                rgb[0] as f64 / maxval,
                rgb[1] as f64 / maxval,
                rgb[2] as f64 / maxval,
            ));
        }
    }
    GrayImage::new(header.width, header.height, data)
}

fn read_ascii_samples(bytes: &[u8], n: usize, path: &Path) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(n);
    let mut pos = 0;
    while out.len() < n {
        pos = skip_pnm_space(bytes, pos);
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("{}: truncated ASCII PNM payload", path.display()),
            )));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        out.push(
            text.parse()
                .map_err(|_| Error::format(path, "bad ASCII sample"))?,
        );
    }
    Ok(out)
}

/// Binary samples: one byte each for maxval <= 255, otherwise two bytes
/// most-significant first.
fn read_binary_samples(bytes: &[u8], n: usize, maxval: u32, path: &Path) -> Result<Vec<u32>> {
    let wide = maxval > 255;
    let need = n * if wide { 2 } else { 1 };
    if bytes.len() < need {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("{}: truncated PNM payload", path.display()),
        )));
    }
    let mut out = Vec::with_capacity(n);
    if wide {
        for pair in bytes[..need].chunks_exact(2) {
            out.push(u32::from(pair[0]) << 8 | u32::from(pair[1]));
        }
    } else {
        out.extend(bytes[..need].iter().map(|b| u32::from(*b)));
    }
    Ok(out)
}

/// Byte order of a PFM payload, encoded by the sign of the scale field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfmEndian {
    Little,
    Big,
}

/// Read a grayscale PFM disparity map.
///
/// PFM rows are stored bottom-to-top; they are flipped on read. A negative
/// scale marks little-endian floats, positive big-endian. Non-finite
/// samples (Middlebury writes +inf for unknown disparity) become the
/// in-memory sentinel.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<DisparityMap> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"PF") {
        return Err(Error::Unsupported(format!(
            "{}: color 'PF' maps are not supported, expected grayscale 'Pf'",
            path.display()
        )));
    }
    if !bytes.starts_with(b"Pf") {
        return Err(Error::format(path, "missing 'Pf' magic"));
    }
    let mut pos = 2;
    let mut tokens = Vec::with_capacity(3);
    while tokens.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::format(path, "malformed PFM header"));
        }
        tokens.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::format(path, "malformed PFM header"))?,
        );
    }
    // Exactly one whitespace byte separates the scale from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "malformed PFM header"));
    }
    pos += 1;

    let width: usize = tokens[0]
        .parse()
        .map_err(|_| Error::format(path, "bad PFM width"))?;
    let height: usize = tokens[1]
        .parse()
        .map_err(|_| Error::format(path, "bad PFM height"))?;
    let scale: f64 = tokens[2]
        .parse()
        .map_err(|_| Error::format(path, "bad PFM scale"))?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, "PFM dimensions must be positive"));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(path, "PFM scale must be nonzero"));
    }
    let little = scale < 0.0;

    let need = width * height * 4;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("{}: truncated PFM payload", path.display()),
        )));
    }
    let mut data = vec![0f32; width * height];
    for file_row in 0..height {
        let mem_row = height - 1 - file_row;
        for x in 0..width {
            let off = (file_row * width + x) * 4;
            let raw: [u8; 4] = payload[off..off + 4].try_into().unwrap();
            let v = if little {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            data[mem_row * width + x] = if v.is_finite() { v } else { INVALID_DISPARITY };
        }
    }
    DisparityMap::new(width, height, data)
}

/// Write a grayscale PFM, little-endian (scale -1.0).
pub fn write_pfm(map: &DisparityMap, path: impl AsRef<Path>) -> Result<()> {
    write_pfm_with_endian(map, path, PfmEndian::Little)
}

pub fn write_pfm_with_endian(
    map: &DisparityMap,
    path: impl AsRef<Path>,
    endian: PfmEndian,
) -> Result<()> {
    if map.width == 0 || map.height == 0 {
        return Err(Error::InvalidInput(
            "cannot write an empty disparity map".into(),
        ));
    }
    let path = path.as_ref();
    let scale = match endian {
        PfmEndian::Little => "-1.0",
        PfmEndian::Big => "1.0",
    };
    let mut out = Vec::with_capacity(32 + map.data.len() * 4);
    write!(out, "Pf\n{} {}\n{}\n", map.width, map.height, scale)?;
    for mem_row in (0..map.height).rev() {
        for x in 0..map.width {
            let v = map.get(x, mem_row);
            let v = if v.is_finite() { v } else { f32::INFINITY };
            let raw = match endian {
                PfmEndian::Little => v.to_le_bytes(),
                PfmEndian::Big => v.to_be_bytes(),
            };
            out.extend_from_slice(&raw);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Save an RGB raster as PNG.
pub fn write_png(raster: &RgbRaster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = image::RgbImage::from_raw(
        raster.width as u32,
        raster.height as u32,
        raster.data.clone(),
    )
    .ok_or_else(|| Error::InvalidInput("raster buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, format!("png encode failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_tmp(name: &str, bytes: &[u8]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempdir().unwrap();
        let path = dir.path().join(name);
        fs::write(&path, bytes).unwrap();
        (dir, path)
    }

    #[test]
    fn p5_extremal_values() {
        let (_d, path) = write_tmp("a.pgm", b"P5\n2 1\n255\n\x00\xff");
        let img = read_image(&path).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.data, vec![0.0, 1.0]);
    }

    #[test]
    fn p6_white_is_one() {
        let (_d, path) = write_tmp("w.ppm", b"P6\n1 1\n255\n\xff\xff\xff");
        let img = read_image(&path).unwrap();
        assert!((img.data[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn p6_red_uses_luma_weight() {
        let (_d, path) = write_tmp("r.ppm", b"P6\n1 1\n255\n\xff\x00\x00");
        let img = read_image(&path).unwrap();
        assert!((img.data[0] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn p2_ascii_with_comment() {
        let (_d, path) = write_tmp("c.pgm", b"P2\n# a comment\n2 2\n100\n0 50\n100 25\n");
        let img = read_image(&path).unwrap();
        assert_eq!(img.data, vec![0.0, 0.5, 1.0, 0.25]);
    }

    #[test]
    fn sixteen_bit_pgm_scales_by_maxval() {
        // One sample 0x1234 = 4660, maxval 65535.
        let (_d, path) = write_tmp("d.pgm", b"P5\n1 1\n65535\n\x12\x34");
        let img = read_image(&path).unwrap();
        assert!((img.data[0] - 4660.0 / 65535.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let (_d, path) = write_tmp("t.pgm", b"P5\n2 2\n255\n\x00\x01");
        match read_image(&path) {
            Err(Error::Io(_)) => {}
            other => panic!("expected Io error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_is_format_error() {
        let (_d, path) = write_tmp("m.pgm", b"P5\nnot numbers\n");
        match read_image(&path) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn pfm_single_sample_little_endian() {
        let mut bytes = b"Pf\n1 1\n-1.0\n".to_vec();
        bytes.extend_from_slice(&7.0f32.to_le_bytes());
        let (_d, path) = write_tmp("s.pfm", &bytes);
        let map = read_pfm(&path).unwrap();
        assert_eq!(map.data, vec![7.0]);
    }

    #[test]
    fn pfm_rows_flip_bottom_to_top() {
        // File order: row [1.0] then row [2.0]; bottom-up storage means the
        // first file row is the bottom of the image.
        let mut bytes = b"Pf\n1 2\n-1.0\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        let (_d, path) = write_tmp("f.pfm", &bytes);
        let map = read_pfm(&path).unwrap();
        assert_eq!(map.get(0, 0), 2.0); // top row
        assert_eq!(map.get(0, 1), 1.0); // bottom row
    }

    #[test]
    fn pfm_big_endian_positive_scale() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&3.5f32.to_be_bytes());
        let (_d, path) = write_tmp("b.pfm", &bytes);
        assert_eq!(read_pfm(&path).unwrap().data, vec![3.5]);
    }

    #[test]
    fn pfm_nonfinite_becomes_sentinel() {
        let mut bytes = b"Pf\n1 1\n-1.0\n".to_vec();
        bytes.extend_from_slice(&f32::INFINITY.to_le_bytes());
        let (_d, path) = write_tmp("i.pfm", &bytes);
        let map = read_pfm(&path).unwrap();
        assert!(!map.is_valid(0, 0));
    }

    #[test]
    fn pfm_color_header_unsupported() {
        let (_d, path) = write_tmp("c.pfm", b"PF\n1 1\n-1.0\n");
        match read_pfm(&path) {
            Err(Error::Unsupported(_)) => {}
            other => panic!("expected Unsupported, got {other:?}"),
        }
    }

    #[test]
    fn pfm_roundtrip_both_endians() {
        let map = DisparityMap::new(3, 3, (0..9).map(|i| i as f32 * 1.25 + 0.1).collect()).unwrap();
        for endian in [PfmEndian::Little, PfmEndian::Big] {
            let dir = tempdir().unwrap();
            let path = dir.path().join("rt.pfm");
            write_pfm_with_endian(&map, &path, endian).unwrap();
            assert_eq!(read_pfm(&path).unwrap(), map);
        }
    }

    #[test]
    fn pfm_writes_inf_for_invalid() {
        let mut map = DisparityMap::filled(2, 1, 4.0);
        map.set(1, 0, INVALID_DISPARITY);
        let dir = tempdir().unwrap();
        let path = dir.path().join("inv.pfm");
        write_pfm(&map, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let tail: [u8; 4] = bytes[bytes.len() - 4..].try_into().unwrap();
        assert_eq!(f32::from_le_bytes(tail), f32::INFINITY);
        assert!(!read_pfm(&path).unwrap().is_valid(1, 0));
    }

    #[test]
    fn empty_map_rejected() {
        let map = DisparityMap {
            width: 0,
            height: 0,
            data: vec![],
        };
        let dir = tempdir().unwrap();
        assert!(write_pfm(&map, dir.path().join("e.pfm")).is_err());
    }

    #[test]
    fn calib_middlebury_keys() {
        let (_d, path) = write_tmp("calib.txt", b"ndisp=260\nwidth=2964\nheight=2000\n");
        let info = parse_calib(&path).unwrap();
        assert_eq!(info.ndisp, 260);
        assert_eq!(info.width, Some(2964));
        assert_eq!(info.height, Some(2000));
        assert_eq!(info.d_max(), 259);
    }

    #[test]
    fn calib_minimal_and_unknown_keys() {
        let (_d, path) = write_tmp("calib.txt", b"cam0=[100 0 50]\nndisp=1\nbaseline=160\n");
        let info = parse_calib(&path).unwrap();
        assert_eq!(info.ndisp, 1);
        assert_eq!(info.width, None);
    }

    #[test]
    fn calib_missing_ndisp_is_error() {
        let (_d, path) = write_tmp("calib.txt", b"width=100\nheight=100\n");
        match parse_calib(&path) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected Format error, got {other:?}"),
        }
    }
}
