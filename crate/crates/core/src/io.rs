//! File formats: binary PGM frames, ASCII PLY clouds, landmark CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Point2, Point3, Vector3};

use crate::cloud::PointCloudFrame;
use crate::error::{Error, Result};
use crate::volume::FrameVolume;

/// One 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_pgm(bytes: &[u8], origin: &str) -> Result<GrayImage> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(origin, 1, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates maxval from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::parse(origin, 1, format!("unsupported magic '{}'", fields[0])));
    }
    let num = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::parse(origin, 1, format!("bad header field '{s}'")))
    };
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::parse(origin, 1, format!("only 8-bit PGM supported, maxval {maxval}")));
    }
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(Error::parse(origin, 1, "truncated PGM raster"));
    }
    Ok(GrayImage {
        width,
        height,
        data: bytes[pos..pos + n].to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, &path.display().to_string())
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn frame_file_name(t: usize, ext: &str) -> String {
    format!("frame_{t:04}.{ext}")
}

/// Lists `frame_NNNN.<ext>` files in index order, requiring them contiguous
/// from zero.
fn frame_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    loop {
        let p = dir.join(frame_file_name(files.len(), ext));
        if !p.exists() {
            break;
        }
        files.push(p);
    }
    if files.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("no frame_*.{ext} files")),
        ));
    }
    Ok(files)
}

pub fn read_volume_dir(dir: &Path) -> Result<FrameVolume> {
    let mut frames = Vec::new();
    let (mut w, mut h) = (0, 0);
    for (i, p) in frame_files(dir, "pgm")?.iter().enumerate() {
        let img = read_pgm(p)?;
        if i == 0 {
            (w, h) = (img.width, img.height);
        } else if (img.width, img.height) != (w, h) {
            return Err(Error::Validation(format!(
                "{}: {}x{} frame in a {w}x{h} volume",
                p.display(),
                img.width,
                img.height
            )));
        }
        frames.push(img.data);
    }
    FrameVolume::from_frames(h, w, frames)
}

pub fn write_volume_dir(dir: &Path, volume: &FrameVolume) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..volume.frames() {
        let f = volume.frame(t);
        write_pgm(
            &dir.join(frame_file_name(t, "pgm")),
            &GrayImage {
                width: f.width,
                height: f.height,
                data: f.data.to_vec(),
            },
        )?;
    }
    Ok(())
}

/// ASCII PLY with float32 `x y z` (and `nx ny nz` when normals exist).
pub fn encode_ply(cloud: &PointCloudFrame) -> String {
    let mut s = String::with_capacity(32 * cloud.len() + 128);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.normals.is_some() {
        s.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p.x as f32, p.y as f32, p.z as f32);
        if let Some(n) = &cloud.normals {
            let _ = write!(s, " {} {} {}", n[i].x as f32, n[i].y as f32, n[i].z as f32);
        }
        s.push('\n');
    }
    s
}

pub fn decode_ply(text: &str, origin: &str) -> Result<PointCloudFrame> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::parse(origin, 1, "missing 'ply' magic")),
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut header_done = false;
    for (i, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(Error::parse(origin, i + 1, format!("unsupported format '{fmt}'")));
                }
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(n.parse().map_err(|_| {
                        Error::parse(origin, i + 1, format!("bad vertex count '{n}'"))
                    })?);
                }
            }
            ["property", "list", ..] => {}
            ["property", _ty, name] => {
                if in_vertex {
                    props.push(name.to_string());
                }
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            [] => {}
            _ => return Err(Error::parse(origin, i + 1, format!("unexpected header line '{line}'"))),
        }
    }
    if !header_done {
        return Err(Error::parse(origin, 1, "missing end_header"));
    }
    let n = vertex_count.ok_or_else(|| Error::parse(origin, 1, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (xi, yi, zi) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::parse(origin, 1, "vertex element lacks x, y, z")),
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };

    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::new();
    for _ in 0..n {
        let (i, line) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 0, format!("expected {n} vertices")))?;
        let vals: Vec<f32> = line
            .split_whitespace()
            .map(|t| t.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(origin, i + 1, "bad vertex value"))?;
        if vals.len() < props.len() {
            return Err(Error::parse(origin, i + 1, "short vertex row"));
        }
        points.push(Point3::new(vals[xi] as f64, vals[yi] as f64, vals[zi] as f64));
        if let Some((a, b, c)) = normal_cols {
            let v = Vector3::new(vals[a] as f64, vals[b] as f64, vals[c] as f64);
            normals.push(v.normalize());
        }
    }
    if normal_cols.is_some() {
        PointCloudFrame::with_normals(points, normals)
    } else {
        PointCloudFrame::new(points)
    }
}

pub fn read_ply(path: &Path) -> Result<PointCloudFrame> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_ply(&text, &path.display().to_string())
}

pub fn write_ply(path: &Path, cloud: &PointCloudFrame) -> Result<()> {
    fs::write(path, encode_ply(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_cloud_dir(dir: &Path) -> Result<Vec<PointCloudFrame>> {
    frame_files(dir, "ply")?.iter().map(|p| read_ply(p)).collect()
}

pub fn write_cloud_dir(dir: &Path, clouds: &[PointCloudFrame]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, c) in clouds.iter().enumerate() {
        write_ply(&dir.join(frame_file_name(t, "ply")), c)?;
    }
    Ok(())
}

fn parse_landmark_rows<const D: usize>(
    text: &str,
    origin: &str,
    header: &str,
) -> Result<Vec<Vec<[f64; D]>>> {
    let mut frames: Vec<Vec<[f64; D]>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == header) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != D + 2 {
            return Err(Error::parse(origin, i + 1, format!("expected {} columns", D + 2)));
        }
        let frame: usize = cols[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(origin, i + 1, "bad frame index"))?;
        let idx: usize = cols[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(origin, i + 1, "bad landmark index"))?;
        let mut v = [0.0; D];
        for (d, c) in v.iter_mut().zip(&cols[2..]) {
            *d = c
                .trim()
                .parse()
                .map_err(|_| Error::parse(origin, i + 1, format!("bad coordinate '{c}'")))?;
        }
        if frame == frames.len() {
            frames.push(Vec::new());
        } else if frame + 1 != frames.len() {
            return Err(Error::parse(origin, i + 1, "frames must be contiguous and ascending"));
        }
        let cur = frames.last_mut().unwrap();
        if idx != cur.len() {
            return Err(Error::parse(origin, i + 1, "landmark indices must ascend from 0"));
        }
        cur.push(v);
    }
    Ok(frames)
}

pub const LANDMARKS2D_HEADER: &str = "frame,idx,x,y";
pub const LANDMARKS3D_HEADER: &str = "frame,idx,x,y,z";

pub fn parse_landmarks2d(text: &str, origin: &str) -> Result<Vec<Vec<Point2<f64>>>> {
    Ok(parse_landmark_rows::<2>(text, origin, LANDMARKS2D_HEADER)?
        .into_iter()
        .map(|f| f.into_iter().map(|[x, y]| Point2::new(x, y)).collect())
        .collect())
}

pub fn parse_landmarks3d(text: &str, origin: &str) -> Result<Vec<Vec<Point3<f64>>>> {
    Ok(parse_landmark_rows::<3>(text, origin, LANDMARKS3D_HEADER)?
        .into_iter()
        .map(|f| f.into_iter().map(|[x, y, z]| Point3::new(x, y, z)).collect())
        .collect())
}

pub fn format_landmarks2d(frames: &[Vec<Point2<f64>>]) -> String {
    let mut s = format!("{LANDMARKS2D_HEADER}\n");
    for (t, f) in frames.iter().enumerate() {
        for (j, p) in f.iter().enumerate() {
            let _ = writeln!(s, "{t},{j},{},{}", p.x, p.y);
        }
    }
    s
}

pub fn format_landmarks3d(frames: &[Vec<Point3<f64>>]) -> String {
    let mut s = format!("{LANDMARKS3D_HEADER}\n");
    for (t, f) in frames.iter().enumerate() {
        for (j, p) in f.iter().enumerate() {
            let _ = writeln!(s, "{t},{j},{},{},{}", p.x, p.y, p.z);
        }
    }
    s
}

pub fn read_landmarks2d(path: &Path) -> Result<Vec<Vec<Point2<f64>>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks2d(&text, &path.display().to_string())
}

pub fn read_landmarks3d(path: &Path) -> Result<Vec<Vec<Point3<f64>>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks3d(&text, &path.display().to_string())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a landmark subset file: one 0-based index per line, `#` comments.
pub fn parse_index_list(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter_map(|(i, l)| {
            let l = l.split('#').next().unwrap_or("").trim();
            (!l.is_empty()).then_some((i, l))
        })
        .map(|(i, l)| {
            l.parse()
                .map_err(|_| Error::parse("landmark subset", i + 1, format!("bad index '{l}'")))
        })
        .collect()
}
