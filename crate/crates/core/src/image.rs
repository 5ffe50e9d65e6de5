//! Single-channel image planes, file I/O and patch sampling.
//!
//! Samples are kept as `f64` in the canonical gray-level range `[0, 255]`.
//! Color inputs are reduced to their green band on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grid of real samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Side of the square patches used throughout the experiments.
pub const DEFAULT_PATCH_SIZE: usize = 128;

/// Top-left corner of a patch inside its source plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Origin {
    pub x: usize,
    pub y: usize,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidPlane(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidPlane(format!(
                "expected {} samples for {width}x{height}, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidPlane(format!("non-finite sample at index {i}")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "plane dimensions must be positive");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Builds a plane by evaluating `f(x, y)` at every site.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "plane dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    /// Builds a plane from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidPlane("ragged rows".into()));
        }
        Self::new(width, height, rows.concat())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Sample with edge replication for out-of-range coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Clamps to `[0, 255]` and rounds half away from zero, as when storing 8-bit data.
    pub fn quantize_u8(&self) -> Plane {
        self.map(|v| v.round().clamp(0.0, 255.0))
    }

    /// Rectangular sub-plane; panics when the window leaves the plane.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Plane {
        assert!(x0 + width <= self.width && y0 + height <= self.height);
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + width]);
        }
        Plane { width, height, data }
    }

    /// Copies `src` into this plane with its top-left corner at `(x0, y0)`.
    pub fn paste(&mut self, src: &Plane, x0: usize, y0: usize) {
        assert!(x0 + src.width <= self.width && y0 + src.height <= self.height);
        for y in 0..src.height {
            let dst = (y0 + y) * self.width + x0;
            self.data[dst..dst + src.width].copy_from_slice(src.row(y));
        }
    }
}

/// `out[y][x] = in[x][y]`.
pub fn transpose(p: &Plane) -> Plane {
    let (w, h) = (p.width, p.height);
    let mut data = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            data[x * h + y] = p.data[y * w + x];
        }
    }
    Plane {
        width: h,
        height: w,
        data,
    }
}

/// Square patches at origins `(i * stride, j * stride)` that fit entirely
/// inside `p`, enumerated row-major from the top-left.
pub fn extract_patches(p: &Plane, size: usize, stride: usize) -> Result<Vec<(Plane, Origin)>> {
    Ok(patch_origins(p.width, p.height, size, stride)?
        .into_iter()
        .map(|o| (p.crop(o.x, o.y, size, size), o))
        .collect())
}

/// Origins visited by [`extract_patches`].
pub fn patch_origins(width: usize, height: usize, size: usize, stride: usize) -> Result<Vec<Origin>> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidParameter(format!(
            "patch size and stride must be positive (size {size}, stride {stride})"
        )));
    }
    if size > width || size > height {
        return Err(Error::TooSmall(format!(
            "patch size {size} exceeds plane {width}x{height}"
        )));
    }
    let mut out = Vec::new();
    for y in (0..=height - size).step_by(stride) {
        for x in (0..=width - size).step_by(stride) {
            out.push(Origin { x, y });
        }
    }
    Ok(out)
}

/// Loads an 8-bit image. Binary PGM is read as is; binary PPM and PNG color
/// images are reduced to the green band.
pub fn load_image(path: impl AsRef<Path>) -> Result<Plane> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

pub(crate) fn decode_image(bytes: &[u8], path: &Path) -> Result<Plane> {
    if bytes.starts_with(b"P5") {
        decode_pnm(bytes, path, 1)
    } else if bytes.starts_with(b"P6") {
        decode_pnm(bytes, path, 3)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes, path)
    } else {
        Err(Error::decode(path, "unrecognized file signature"))
    }
}

fn decode_pnm(bytes: &[u8], path: &Path, channels: usize) -> Result<Plane> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::decode(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::decode(path, "expected a number in header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::decode(path, "header number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::decode(path, "missing separator after header"));
    }
    pos += 1;
    if maxval != 255 {
        return Err(Error::UnsupportedDepth {
            path: path.into(),
            detail: format!("maxval {maxval}, only 8-bit (255) is accepted"),
        });
    }
    if width == 0 || height == 0 {
        return Err(Error::decode(path, "zero image dimension"));
    }
    let n = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::decode(path, "image dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(Error::decode(
            path,
            format!("truncated pixel data: {} of {n} bytes", payload.len()),
        ));
    }
    let green = if channels == 3 { 1 } else { 0 };
    let data = payload[..n].chunks_exact(channels).map(|px| px[green] as f64).collect();
    Plane::new(width, height, data)
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Plane> {
    use png::{BitDepth, ColorType};

    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::decode(path, e.to_string()))?;
    let info = reader.info();
    if info.bit_depth != BitDepth::Eight {
        return Err(Error::UnsupportedDepth {
            path: path.into(),
            detail: format!("{:?}-bit PNG", info.bit_depth),
        });
    }
    let (channels, pick) = match info.color_type {
        ColorType::Grayscale => (1, 0),
        ColorType::GrayscaleAlpha => (2, 0),
        ColorType::Rgb => (3, 1),
        ColorType::Rgba => (4, 1),
        ColorType::Indexed => {
            return Err(Error::decode(path, "palette PNGs are not supported"));
        }
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::decode(path, "image too large"))?;
    let mut buf = vec![0; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::decode(path, e.to_string()))?;
    let line = frame.line_size;
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let row = &buf[y * line..y * line + width * channels];
        data.extend(row.chunks_exact(channels).map(|px| px[pick] as f64));
    }
    Plane::new(width, height, data)
}

/// Encodes a plane as binary 8-bit PGM (P5), rounding and clamping samples.
pub fn encode_pgm(p: &Plane) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", p.width, p.height).into_bytes();
    out.extend(p.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    out
}

pub fn save_pgm(p: &Plane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pgm(p)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn pgm_identity_decode() {
        let d = tmp();
        let path = d.path().join("a.pgm");
        fs::write(&path, b"P5\n2 2\n255\n\x00\x80\xff\x40").unwrap();
        let p = load_image(&path).unwrap();
        assert_eq!(p.data(), &[0.0, 128.0, 255.0, 64.0]);
    }

    #[test]
    fn pgm_header_comments() {
        let d = tmp();
        let path = d.path().join("c.pgm");
        fs::write(&path, b"P5 # a comment\n3 # w\n1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(load_image(&path).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn ppm_takes_green_band() {
        let d = tmp();
        let path = d.path().join("a.ppm");
        fs::write(&path, b"P6\n1 1\n255\n\x0a\xc8\x1e").unwrap();
        assert_eq!(load_image(&path).unwrap().data(), &[200.0]);
    }

    #[test]
    fn truncated_file_is_a_decode_error() {
        let d = tmp();
        let path = d.path().join("t.pgm");
        fs::write(&path, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(load_image(&path), Err(Error::Decode { .. })));
        fs::write(&path, b"P5\n4").unwrap();
        assert!(matches!(load_image(&path), Err(Error::Decode { .. })));
    }

    #[test]
    fn missing_file_and_bad_depth() {
        let d = tmp();
        assert!(matches!(load_image(d.path().join("nope.pgm")), Err(Error::Io { .. })));
        let path = d.path().join("w.pgm");
        fs::write(&path, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert!(matches!(load_image(&path), Err(Error::UnsupportedDepth { .. })));
        fs::write(&path, b"P5\n1 1\n15\n\x00").unwrap();
        assert!(matches!(load_image(&path), Err(Error::UnsupportedDepth { .. })));
    }

    fn write_png(path: &Path, w: u32, h: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) {
        let file = fs::File::create(path).unwrap();
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w, h);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc.write_header().unwrap();
        writer.write_image_data(data).unwrap();
    }

    #[test]
    fn png_rgb_green_band_and_gray() {
        let d = tmp();
        let path = d.path().join("rgb.png");
        write_png(
            &path,
            2,
            1,
            png::ColorType::Rgb,
            png::BitDepth::Eight,
            &[10, 200, 30, 1, 2, 3],
        );
        assert_eq!(load_image(&path).unwrap().data(), &[200.0, 2.0]);

        let path = d.path().join("g.png");
        write_png(&path, 2, 1, png::ColorType::Grayscale, png::BitDepth::Eight, &[7, 9]);
        assert_eq!(load_image(&path).unwrap().data(), &[7.0, 9.0]);
    }

    #[test]
    fn png_rejects_other_depths() {
        let d = tmp();
        let path = d.path().join("g16.png");
        write_png(&path, 1, 1, png::ColorType::Grayscale, png::BitDepth::Sixteen, &[1, 2]);
        assert!(matches!(load_image(&path), Err(Error::UnsupportedDepth { .. })));
        let path = d.path().join("g1.png");
        write_png(
            &path,
            8,
            1,
            png::ColorType::Grayscale,
            png::BitDepth::One,
            &[0b1010_1010],
        );
        assert!(matches!(load_image(&path), Err(Error::UnsupportedDepth { .. })));
    }

    #[test]
    fn transpose_examples() {
        let one = Plane::filled(1, 1, 5.0);
        assert_eq!(transpose(&one), one);
        let p = Plane::from_rows(&[vec![1., 2., 3.], vec![4., 5., 6.]]).unwrap();
        let t = transpose(&p);
        assert_eq!((t.width(), t.height()), (2, 3));
        assert_eq!(t.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn patch_grid_counts() {
        let p = Plane::filled(256, 256, 0.0);
        assert_eq!(extract_patches(&p, 128, 128).unwrap().len(), 4);

        let p = Plane::from_fn(128, 128, |x, y| (x * 3 + y) as f64);
        let patches = extract_patches(&p, 128, 128).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].0, p);

        let p = Plane::filled(300, 300, 0.0);
        let origins: Vec<_> = extract_patches(&p, 128, 64)
            .unwrap()
            .into_iter()
            .map(|(_, o)| o)
            .collect();
        assert_eq!(origins.len(), 9);
        assert_eq!(origins[1], Origin { x: 64, y: 0 });
        assert_eq!(origins[8], Origin { x: 128, y: 128 });
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let p = Plane::filled(100, 200, 0.0);
        assert!(matches!(extract_patches(&p, 128, 128), Err(Error::TooSmall(_))));
        assert!(extract_patches(&p, 10, 0).is_err());
    }

    #[test]
    fn save_clamps_and_rounds() {
        let d = tmp();
        let path = d.path().join("s.pgm");
        let p = Plane::new(3, 1, vec![255.7, -3.0, 12.4]).unwrap();
        save_pgm(&p, &path).unwrap();
        assert_eq!(load_image(&path).unwrap().data(), &[255.0, 0.0, 12.0]);
    }

    #[test]
    fn plane_rejects_non_finite() {
        assert!(Plane::new(1, 1, vec![f64::NAN]).is_err());
        assert!(Plane::new(2, 1, vec![0.0]).is_err());
        assert!(Plane::new(0, 0, vec![]).is_err());
    }

    fn arb_plane() -> impl Strategy<Value = Plane> {
        (1usize..20, 1usize..20).prop_flat_map(|(w, h)| {
            proptest::collection::vec(0u8..=255, w * h)
                .prop_map(move |v| Plane::new(w, h, v.into_iter().map(f64::from).collect()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn transpose_is_an_involution(p in arb_plane()) {
            prop_assert_eq!(transpose(&transpose(&p)), p);
        }

        #[test]
        fn pgm_round_trip_is_exact_on_integers(p in arb_plane()) {
            let back = decode_image(&encode_pgm(&p), Path::new("mem")).unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn disjoint_grid_covers_floor_counts(w in 1usize..300, h in 1usize..300, size in 1usize..64) {
            prop_assume!(size <= w && size <= h);
            let origins = patch_origins(w, h, size, size).unwrap();
            prop_assert_eq!(origins.len(), (w / size) * (h / size));
            let mut seen = std::collections::HashSet::new();
            for o in &origins {
                prop_assert!(seen.insert(*o));
                prop_assert!(o.x % size == 0 && o.y % size == 0);
            }
        }
    }
}
