//! Point-cloud files.
//!
//! * XYZ text: one `x y z` triple per line. Blank lines and lines starting
//!   with `#` are ignored. Values are written in shortest round-trip form,
//!   so text files reproduce `f64` clouds exactly.
//! * Binary: the 4-byte magic `PCB3`, a little-endian `u32` point count,
//!   then `N×3` little-endian `f32` coordinates.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"PCB3";

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in cloud.points() {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `x y z` followed by one column per named scalar array.
pub fn write_xyz_scalars(
    path: &Path,
    cloud: &PointCloud,
    columns: &[(&str, &[f64])],
) -> Result<()> {
    if let Some((name, _)) = columns.iter().find(|(_, c)| c.len() != cloud.len()) {
        return Err(Error::dim(format!(
            "column `{name}` length differs from the cloud"
        )));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "# x y z")?;
    for (name, _) in columns {
        write!(w, " {name}")?;
    }
    writeln!(w)?;
    for (i, p) in cloud.points().iter().enumerate() {
        write!(w, "{} {} {}", p[0], p[1], p[2])?;
        for (_, col) in columns {
            write!(w, " {}", col[i])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut points = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = t
            .split_whitespace()
            .take(3)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if vals.len() != 3 {
            return Err(Error::format(format!(
                "{}:{}: expected three coordinates",
                path.display(),
                lineno + 1
            )));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!(
                "{}:{}: non-finite coordinate",
                path.display(),
                lineno + 1
            )));
        }
        points.push([vals[0], vals[1], vals[2]]);
    }
    PointCloud::new(points)
}

pub fn write_binary(path: &Path, cloud: &PointCloud) -> Result<()> {
    let n = u32::try_from(cloud.len())
        .map_err(|_| Error::format("cloud too large for binary format"))?;
    let mut buf = Vec::with_capacity(8 + cloud.len() * 12);
    buf.extend_from_slice(BINARY_MAGIC);
    buf.extend_from_slice(&n.to_le_bytes());
    for v in cloud.flat() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..4] != BINARY_MAGIC {
        return Err(Error::format(format!(
            "{}: not a binary point cloud",
            path.display()
        )));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + n * 12 {
        return Err(Error::format(format!(
            "{}: expected {} points, file holds {} bytes",
            path.display(),
            n,
            bytes.len()
        )));
    }
    let vals: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(format!(
            "{}: non-finite coordinate",
            path.display()
        )));
    }
    PointCloud::from_flat(&vals)
}

/// Reads either format, sniffing the binary magic.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let mut head = [0u8; 4];
    {
        use std::io::Read;
        let mut f = fs::File::open(path)?;
        let n = f.read(&mut head)?;
        if n == 4 && &head == BINARY_MAGIC {
            return read_binary(path);
        }
    }
    read_xyz(path)
}
