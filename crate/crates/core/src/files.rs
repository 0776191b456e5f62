//! On-disk formats: binary landmark tracks, mesh topology, 16-bit PNG
//! frames, plain-text waveforms, and the TOML dataset manifest. All binary
//! integers and floats are little-endian.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::stgraph::FrameImage;

fn ioerr(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

/// Raw tracked landmarks for one video: `frames x vertices x 3` f32 in
/// frame-major order. Untracked frames may carry NaN rows; gap handling
/// happens at ingest, not here.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkFile {
    pub vertex_count: usize,
    pub frame_count: usize,
    pub fps: f64,
    /// `data[(t * V + v) * 3 + axis]`
    pub data: Vec<f32>,
}

impl LandmarkFile {
    pub fn new(vertex_count: usize, frame_count: usize, fps: f64, data: Vec<f32>) -> Result<Self> {
        if data.len() != frame_count * vertex_count * 3 {
            return Err(Error::Shape(format!(
                "landmark buffer has {} values, expected {}",
                data.len(),
                frame_count * vertex_count * 3
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Data("landmark fps must be positive".into()));
        }
        Ok(Self {
            vertex_count,
            frame_count,
            fps,
            data,
        })
    }

    /// True when every coordinate of frame `t` is NaN (an untracked gap).
    pub fn frame_is_gap(&self, t: usize) -> bool {
        let start = t * self.vertex_count * 3;
        self.data[start..start + self.vertex_count * 3]
            .iter()
            .all(|v| v.is_nan())
    }

    pub fn frame_vertices(&self, t: usize) -> Vec<[f64; 3]> {
        let start = t * self.vertex_count * 3;
        (0..self.vertex_count)
            .map(|v| {
                let i = start + v * 3;
                [
                    self.data[i] as f64,
                    self.data[i + 1] as f64,
                    self.data[i + 2] as f64,
                ]
            })
            .collect()
    }
}

const LANDMARK_MAGIC: &[u8; 4] = b"LMK1";

pub fn write_landmarks(path: &Path, lm: &LandmarkFile) -> Result<()> {
    let file = std::fs::File::create(path).map_err(ioerr(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(LANDMARK_MAGIC).map_err(ioerr(path))?;
    w.write_u32::<LittleEndian>(lm.vertex_count as u32)
        .map_err(ioerr(path))?;
    w.write_u32::<LittleEndian>(lm.frame_count as u32)
        .map_err(ioerr(path))?;
    w.write_f64::<LittleEndian>(lm.fps).map_err(ioerr(path))?;
    for &v in &lm.data {
        w.write_f32::<LittleEndian>(v).map_err(ioerr(path))?;
    }
    Ok(())
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkFile> {
    let file = std::fs::File::open(path).map_err(ioerr(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(ioerr(path))?;
    if &magic != LANDMARK_MAGIC {
        return Err(Error::format(
            path.display().to_string(),
            "bad magic; not a landmark file",
        ));
    }
    let v = r.read_u32::<LittleEndian>().map_err(ioerr(path))? as usize;
    let t = r.read_u32::<LittleEndian>().map_err(ioerr(path))? as usize;
    let fps = r.read_f64::<LittleEndian>().map_err(ioerr(path))?;
    let count = t
        .checked_mul(v)
        .and_then(|x| x.checked_mul(3))
        .ok_or_else(|| Error::format(path.display().to_string(), "dimension overflow"))?;
    let mut data = vec![0.0f32; count];
    for x in data.iter_mut() {
        *x = r.read_f32::<LittleEndian>().map_err(ioerr(path))?;
    }
    LandmarkFile::new(v, t, fps, data)
}

const TOPOLOGY_MAGIC: &[u8; 4] = b"TOP1";

/// Topology file: face count then `F x 3` vertex indices.
pub fn write_topology(path: &Path, faces: &[[u32; 3]]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(ioerr(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(TOPOLOGY_MAGIC).map_err(ioerr(path))?;
    w.write_u32::<LittleEndian>(faces.len() as u32)
        .map_err(ioerr(path))?;
    for f in faces {
        for &i in f {
            w.write_u32::<LittleEndian>(i).map_err(ioerr(path))?;
        }
    }
    Ok(())
}

pub fn read_topology(path: &Path) -> Result<Vec<[u32; 3]>> {
    let file = std::fs::File::open(path).map_err(ioerr(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(ioerr(path))?;
    if &magic != TOPOLOGY_MAGIC {
        return Err(Error::format(
            path.display().to_string(),
            "bad magic; not a topology file",
        ));
    }
    let f = r.read_u32::<LittleEndian>().map_err(ioerr(path))? as usize;
    let mut faces = Vec::with_capacity(f);
    for _ in 0..f {
        let mut face = [0u32; 3];
        for i in face.iter_mut() {
            *i = r.read_u32::<LittleEndian>().map_err(ioerr(path))?;
        }
        faces.push(face);
    }
    Ok(faces)
}

/// Writes a waveform as `time value` lines; `#` lines are comments.
pub fn write_waveform(path: &Path, times: &[f64], values: &[f64], header: &str) -> Result<()> {
    if times.len() != values.len() {
        return Err(Error::Shape("times and values differ in length".into()));
    }
    let file = std::fs::File::create(path).map_err(ioerr(path))?;
    let mut w = BufWriter::new(file);
    for line in header.lines() {
        writeln!(w, "# {line}").map_err(ioerr(path))?;
    }
    for (t, v) in times.iter().zip(values) {
        writeln!(w, "{t:.6} {v:.9}").map_err(ioerr(path))?;
    }
    Ok(())
}

pub fn read_waveform(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(ioerr(path))?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse = |s: Option<&str>| -> Result<f64> {
            s.and_then(|x| x.parse().ok()).ok_or_else(|| {
                Error::format(
                    path.display().to_string(),
                    format!("line {}: expected `time value`", lineno + 1),
                )
            })
        };
        times.push(parse(parts.next())?);
        values.push(parse(parts.next())?);
    }
    Ok((times, values))
}

/// Writes an RGB frame as 16-bit PNG.
pub fn write_frame_png(path: &Path, frame: &FrameImage) -> Result<()> {
    let mut buf: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> =
        image::ImageBuffer::new(frame.width, frame.height);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        let rgb = frame.pixel(x, y);
        *p = image::Rgb([
            (rgb[0].clamp(0.0, 1.0) * 65535.0).round() as u16,
            (rgb[1].clamp(0.0, 1.0) * 65535.0).round() as u16,
            (rgb[2].clamp(0.0, 1.0) * 65535.0).round() as u16,
        ]);
    }
    buf.save(path)
        .map_err(|e| Error::format(path.display().to_string(), format!("png write: {e}")))
}

/// Reads a PNG (8 or 16 bit) into `[0, 1]` floats.
pub fn read_frame_png(path: &Path) -> Result<FrameImage> {
    let img = image::open(path)
        .map_err(|e| Error::format(path.display().to_string(), format!("png read: {e}")))?;
    let rgb = img.into_rgb16();
    let (width, height) = rgb.dimensions();
    let mut frame = FrameImage::new(width, height);
    for (x, y, p) in rgb.enumerate_pixels() {
        frame.set_pixel(
            x,
            y,
            [
                p.0[0] as f32 / 65535.0,
                p.0[1] as f32 / 65535.0,
                p.0[2] as f32 / 65535.0,
            ],
        );
    }
    Ok(frame)
}

/// Frame source backed by a directory of numbered PNG files.
pub struct PngDirSource {
    paths: Vec<PathBuf>,
    width: u32,
    height: u32,
}

impl PngDirSource {
    /// Collects `*.png` under `dir` in lexicographic order.
    pub fn open(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(ioerr(dir))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Data(format!(
                "no png frames in {}",
                dir.display()
            )));
        }
        let first = read_frame_png(&paths[0])?;
        Ok(Self {
            paths,
            width: first.width,
            height: first.height,
        })
    }
}

impl crate::stgraph::FrameSource for PngDirSource {
    fn frame_count(&self) -> usize {
        self.paths.len()
    }
    fn frame(&self, t: usize) -> Result<FrameImage> {
        read_frame_png(&self.paths[t])
    }
    fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }
}

/// One video entry in a dataset manifest. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestVideo {
    pub name: String,
    pub frames_dir: String,
    pub landmarks: String,
    /// Reference pulse waveform (text `time value`).
    pub reference: String,
    pub fps: f64,
    /// Split assignment: `train`, `val`, or `test`.
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".into()
}

/// Dataset manifest: shared topology plus a list of videos.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub topology: String,
    pub videos: Vec<ManifestVideo>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialize: {e}")))?;
        std::fs::write(path, text).map_err(ioerr(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(ioerr(path))?;
        toml::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), format!("manifest: {e}")))
    }
}
