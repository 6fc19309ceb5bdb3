//! On-disk formats: PFM float maps, PNG images, camera JSON and the dataset
//! layout `scene/<id>/{image.png, depth.pfm, camera.json, sky.png}`.
//!
//! Every writer goes through [`write_atomic`], so a failed run never leaves a
//! truncated file behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::camera::Camera;
use crate::color::Rgb;
use crate::error::{Error, Result};
use crate::geometry::PosedDepth;
use crate::grid::PixelGrid;
use crate::sh::Normal;

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// A decoded PFM raster, rows stored top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Pfm {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("PFM: truncated header".into()));
            }
            let t = std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("PFM: header is not ASCII".into()))?;
            Ok(t.to_string())
        };
        let channels = match token()?.as_str() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(Error::Format(format!("PFM: unknown magic {other:?}"))),
        };
        let parse_dim = |t: String| -> Result<usize> {
            t.parse::<usize>()
                .ok()
                .filter(|&d| d > 0)
                .ok_or_else(|| Error::Format(format!("PFM: bad dimension {t:?}")))
        };
        let width = parse_dim(token()?)?;
        let height = parse_dim(token()?)?;
        let scale: f64 = token()?
            .parse()
            .map_err(|_| Error::Format("PFM: bad scale line".into()))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::Format("PFM: scale must be finite and non-zero".into()));
        }
        drop(token);
        // exactly one whitespace byte separates the header from the payload
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Format("PFM: missing payload".into()));
        }
        pos += 1;
        let count = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::Format("PFM: dimensions overflow".into()))?;
        let payload = &bytes[pos..];
        if payload.len() != count * 4 {
            return Err(Error::Format(format!(
                "PFM: expected {} payload bytes, found {}",
                count * 4,
                payload.len()
            )));
        }
        let little = scale < 0.0;
        let row_len = width * channels;
        let mut data = vec![0.0f32; count];
        for (k, chunk) in payload.chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            let (file_row, col) = (k / row_len, k % row_len);
            data[(height - 1 - file_row) * row_len + col] = v;
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Little-endian encoding.
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "PF" } else { "Pf" };
        let mut out = format!("{magic}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        let row_len = self.width * self.channels;
        for row in (0..self.height).rev() {
            for v in &self.data[row * row_len..(row + 1) * row_len] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn expect_channels(&self, channels: usize) -> Result<()> {
        if self.channels != channels {
            return Err(Error::Format(format!(
                "PFM: expected {channels} channel(s), found {}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn to_scalar(&self) -> Result<PixelGrid<f64>> {
        self.expect_channels(1)?;
        Ok(PixelGrid::from_fn(self.width, self.height, |x, y| {
            let v = self.data[y * self.width + x];
            (!v.is_nan()).then_some(v as f64)
        }))
    }

    pub fn to_vector3(&self) -> Result<PixelGrid<[f64; 3]>> {
        self.expect_channels(3)?;
        Ok(PixelGrid::from_fn(self.width, self.height, |x, y| {
            let i = 3 * (y * self.width + x);
            let v = &self.data[i..i + 3];
            (!v.iter().any(|c| c.is_nan())).then(|| [v[0] as f64, v[1] as f64, v[2] as f64])
        }))
    }

    pub fn from_scalar(grid: &PixelGrid<f64>) -> Self {
        let data = (0..grid.len())
            .map(|i| grid.at(i).map_or(f32::NAN, |v| v as f32))
            .collect();
        Self {
            width: grid.width(),
            height: grid.height(),
            channels: 1,
            data,
        }
    }

    pub fn from_vector3(grid: &PixelGrid<[f64; 3]>) -> Self {
        let data = (0..grid.len())
            .flat_map(|i| match grid.at(i) {
                Some(v) => [v[0] as f32, v[1] as f32, v[2] as f32],
                None => [f32::NAN; 3],
            })
            .collect();
        Self {
            width: grid.width(),
            height: grid.height(),
            channels: 3,
            data,
        }
    }
}

pub fn read_pfm(path: &Path) -> Result<Pfm> {
    Pfm::decode(&read_file(path)?)
}

pub fn write_pfm(path: &Path, pfm: &Pfm) -> Result<()> {
    write_atomic(path, &pfm.encode())
}

pub fn read_depth(path: &Path) -> Result<PixelGrid<f64>> {
    read_pfm(path)?.to_scalar()
}

pub fn write_scalar_pfm(path: &Path, grid: &PixelGrid<f64>) -> Result<()> {
    write_pfm(path, &Pfm::from_scalar(grid))
}

pub fn read_normals(path: &Path) -> Result<PixelGrid<Normal>> {
    Ok(read_pfm(path)?.to_vector3()?.map(|v| Normal::new(v[0], v[1], v[2])))
}

pub fn write_normals(path: &Path, normals: &PixelGrid<Normal>) -> Result<()> {
    write_pfm(path, &Pfm::from_vector3(&normals.map(|n| [n.x, n.y, n.z])))
}

pub fn read_rgb_pfm(path: &Path) -> Result<PixelGrid<Rgb>> {
    Ok(read_pfm(path)?.to_vector3()?.map(Rgb::from_array))
}

pub fn write_rgb_pfm(path: &Path, image: &PixelGrid<Rgb>) -> Result<()> {
    write_pfm(path, &Pfm::from_vector3(&image.map(Rgb::to_array)))
}

/// Decodes an 8- or 16-bit PNG into `[0, 1]`. Alpha 0 marks invalid pixels.
pub fn decode_png(bytes: &[u8]) -> Result<PixelGrid<Rgb>> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("PNG: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("PNG: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let (depth_bytes, max) = match info.bit_depth {
        png::BitDepth::Eight => (1, 255.0),
        png::BitDepth::Sixteen => (2, 65535.0),
        other => return Err(Error::Format(format!("PNG: unsupported bit depth {other:?}"))),
    };
    let sample = |k: usize| -> f64 {
        let v = if depth_bytes == 1 {
            buf[k] as f64
        } else {
            u16::from_be_bytes([buf[2 * k], buf[2 * k + 1]]) as f64
        };
        v / max
    };
    Ok(PixelGrid::from_fn(w, h, |x, y| {
        let k = (y * w + x) * channels;
        let (rgb, alpha) = match channels {
            1 => (Rgb::splat(sample(k)), None),
            2 => (Rgb::splat(sample(k)), Some(sample(k + 1))),
            3 => (Rgb::new(sample(k), sample(k + 1), sample(k + 2)), None),
            _ => (Rgb::new(sample(k), sample(k + 1), sample(k + 2)), Some(sample(k + 3))),
        };
        (alpha != Some(0.0)).then_some(rgb)
    }))
}

/// Encodes to PNG, quantising `[0, 1]` with rounding. An alpha channel is
/// written only when some pixel is invalid.
pub fn encode_png(image: &PixelGrid<Rgb>, sixteen_bit: bool) -> Result<Vec<u8>> {
    let has_holes = image.valid_count() < image.len();
    let channels = if has_holes { 4 } else { 3 };
    let max = if sixteen_bit { 65535.0 } else { 255.0 };
    let mut samples = Vec::with_capacity(image.len() * channels);
    for i in 0..image.len() {
        match image.at(i) {
            Some(c) => {
                if !c.is_finite() {
                    return Err(Error::Domain("PNG: cannot encode non-finite pixel".into()));
                }
                samples.extend(c.to_array().map(|v| (v.clamp(0.0, 1.0) * max).round() as u16));
                if has_holes {
                    samples.push(max as u16);
                }
            }
            None => samples.extend([0u16; 4]),
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(if has_holes { png::ColorType::Rgba } else { png::ColorType::Rgb });
        enc.set_depth(if sixteen_bit { png::BitDepth::Sixteen } else { png::BitDepth::Eight });
        let mut writer = enc.write_header().map_err(|e| Error::Format(format!("PNG: {e}")))?;
        let bytes: Vec<u8> = if sixteen_bit {
            samples.iter().flat_map(|v| v.to_be_bytes()).collect()
        } else {
            samples.iter().map(|&v| v as u8).collect()
        };
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Format(format!("PNG: {e}")))?;
    }
    Ok(out)
}

pub fn read_png(path: &Path) -> Result<PixelGrid<Rgb>> {
    decode_png(&read_file(path)?)
}

pub fn write_png(path: &Path, image: &PixelGrid<Rgb>) -> Result<()> {
    write_atomic(path, &encode_png(image, false)?)
}

/// Grey PNG mask: non-zero pixels are set.
pub fn read_mask_png(path: &Path) -> Result<PixelGrid<bool>> {
    let img = read_png(path)?;
    Ok(PixelGrid::from_fn(img.width(), img.height(), |x, y| {
        Some(img.get(x, y).is_some_and(|c| c.sum() > 0.0))
    }))
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_camera(path: &Path, camera: &Camera) -> Result<()> {
    write_json(path, camera)
}

/// One posed photograph, with sky pixels already removed from the image mask.
#[derive(Debug, Clone)]
pub struct View {
    pub id: String,
    pub image: PixelGrid<Rgb>,
    pub depth: PosedDepth,
    /// `true` where `sky.png` marked sky; all `false` when the file is absent.
    pub sky: PixelGrid<bool>,
}

pub const IMAGE_FILE: &str = "image.png";
pub const DEPTH_FILE: &str = "depth.pfm";
pub const CAMERA_FILE: &str = "camera.json";
pub const SKY_FILE: &str = "sky.png";

/// Reads one view directory.
pub fn read_view(dir: &Path) -> Result<View> {
    let image = read_png(&dir.join(IMAGE_FILE))?;
    let depth = read_depth(&dir.join(DEPTH_FILE))?;
    image.ensure_same_dims(&depth)?;
    let camera = read_camera(&dir.join(CAMERA_FILE))?;
    let sky_path = dir.join(SKY_FILE);
    let sky = if sky_path.exists() {
        let m = read_mask_png(&sky_path)?;
        image.ensure_same_dims(&m)?;
        m
    } else {
        PixelGrid::filled(image.width(), image.height(), false)
    };
    let keep: Vec<bool> = (0..image.len()).map(|i| !sky.value(i)).collect();
    let image = image.restrict(&keep)?;
    let depth = PosedDepth::new(depth.restrict(&keep)?, camera)?;
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(View { id, image, depth, sky })
}

pub fn write_view(dir: &Path, image: &PixelGrid<Rgb>, depth: &PosedDepth, sky: Option<&PixelGrid<bool>>) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_png(&dir.join(IMAGE_FILE), image)?;
    write_scalar_pfm(&dir.join(DEPTH_FILE), depth.depth())?;
    write_camera(&dir.join(CAMERA_FILE), depth.camera())?;
    if let Some(sky) = sky {
        write_png(&dir.join(SKY_FILE), &sky.map(|s| Rgb::splat(if s { 1.0 } else { 0.0 })))?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct Dataset {
    pub views: Vec<View>,
    /// Items that could not be read, with the reason.
    pub skipped: Vec<(PathBuf, Error)>,
}

/// Scans `dir/scene/<id>/` in lexicographic order of `<id>`.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let root = dir.join("scene");
    let mut out = Dataset {
        views: Vec::new(),
        skipped: Vec::new(),
    };
    if !root.exists() {
        return Ok(out);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(&root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for path in entries {
        match read_view(&path) {
            Ok(v) => out.views.push(v),
            Err(e) => out.skipped.push((path, e)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gray_pfm_literal() {
        let mut bytes = b"Pf\n2 2\n-1.0\n".to_vec();
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend(v.to_le_bytes());
        }
        let g = Pfm::decode(&bytes).unwrap().to_scalar().unwrap();
        // first stored row is the bottom one
        assert_eq!(g.get(0, 1), Some(1.0));
        assert_eq!(g.get(1, 1), Some(2.0));
        assert_eq!(g.get(0, 0), Some(3.0));
        assert_eq!(g.get(1, 0), Some(4.0));
    }

    #[test]
    fn big_endian_pfm() {
        let mut bytes = b"PF\n1 1\n1.0\n".to_vec();
        for v in [0.25f32, -2.5, 7.0] {
            bytes.extend(v.to_be_bytes());
        }
        let g = Pfm::decode(&bytes).unwrap().to_vector3().unwrap();
        assert_eq!(g.get(0, 0), Some([0.25, -2.5, 7.0]));
    }

    #[test]
    fn malformed_pfm_is_rejected() {
        assert!(Pfm::decode(b"P6\n1 1\n-1.0\n\0\0\0\0").is_err());
        assert!(Pfm::decode(b"Pf\n1 1\n-1.0\n\0\0\0").is_err());
        assert!(Pfm::decode(b"Pf\n0 1\n-1.0\n").is_err());
        assert!(Pfm::decode(b"Pf\n99999999999 99999999999\n-1.0\n").is_err());
        assert!(Pfm::decode(b"Pf\n1 1\n0\n\0\0\0\0").is_err());
    }

    #[test]
    fn nan_marks_holes() {
        let mut g = PixelGrid::filled(3, 2, 1.5);
        g.invalidate(4);
        let back = Pfm::decode(&Pfm::from_scalar(&g).encode()).unwrap().to_scalar().unwrap();
        assert_eq!(back, g);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn pfm_round_trip_is_bit_exact(
            w in 1usize..6, h in 1usize..6, three in any::<bool>(), seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let channels = if three { 3 } else { 1 };
            let data: Vec<f32> = (0..w * h * channels).map(|_| f32::from_bits(rng.gen::<u32>() & 0xBFFF_FFFF)).collect();
            let pfm = Pfm { width: w, height: h, channels, data };
            let back = Pfm::decode(&pfm.encode()).unwrap();
            prop_assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            pfm.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn png_round_trip_and_alpha() {
        let img = PixelGrid::from_fn(4, 3, |x, y| {
            (x + y != 3).then(|| Rgb::new(x as f64 * 51.0 / 255.0, y as f64 * 100.0 / 255.0, 7.0 / 255.0))
        });
        let back = decode_png(&encode_png(&img, false).unwrap()).unwrap();
        assert_eq!(back, img);
        let full = PixelGrid::filled(2, 2, Rgb::new(1.0, 0.0, 0.0));
        let bytes = encode_png(&full, false).unwrap();
        assert_eq!(decode_png(&bytes).unwrap().get(0, 0), Some(Rgb::new(1.0, 0.0, 0.0)));
        let deep = PixelGrid::filled(1, 1, Rgb::new(1000.0 / 65535.0, 0.5, 1.0));
        let back = decode_png(&encode_png(&deep, true).unwrap()).unwrap();
        assert!((back.value(0).r - 1000.0 / 65535.0).abs() < 1e-15);
    }

    #[test]
    fn camera_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("camera.json");
        fs::write(&p, r#"{"f": 500, "cx": 32, "cy": 32, "R": [1,0,0,0,1,0,0,0,1], "t": [0,0,0]}"#).unwrap();
        let c = read_camera(&p).unwrap();
        assert_eq!(c.f(), 500.0);
        fs::write(&p, r#"{"f": 500, "cx": 32, "cy": 32, "R": [1,0,0,0,2,0,0,0,1], "t": [0,0,0]}"#).unwrap();
        assert!(read_camera(&p).is_err());
    }

    #[test]
    fn dataset_scan() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_dataset(dir.path()).unwrap().views.is_empty());
        let cam = Camera::looking_forward(10.0, 1.5, 1.0).unwrap();
        let depth = PosedDepth::new(PixelGrid::filled(4, 3, 2.0), cam).unwrap();
        let img = PixelGrid::filled(4, 3, Rgb::splat(0.5));
        let mut sky = PixelGrid::filled(4, 3, false);
        sky.set(0, true);
        write_view(&dir.path().join("scene/a"), &img, &depth, Some(&sky)).unwrap();
        write_view(&dir.path().join("scene/b"), &img, &depth, None).unwrap();
        fs::write(dir.path().join("scene/b/depth.pfm"), b"garbage").unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.views.len(), 1);
        assert_eq!(ds.skipped.len(), 1);
        let v = &ds.views[0];
        assert_eq!(v.id, "a");
        assert!(!v.image.is_valid(0));
        assert_eq!(v.image.valid_count(), 11);
        assert_eq!(v.depth.depth().valid_count(), 11);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
