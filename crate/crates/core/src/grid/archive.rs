//! On-disk archive layout.
//!
//! ```text
//! <dir>/manifest.tsv   version=1 rows=<R> cols=<C> cell_area_km2=<A>
//!                      <date>\t<file>\t<bytes>\t<crc32 hex>\t<gap 0|1>   (one line per day)
//! <dir>/mask.bin       R*C bytes, 0 = ocean, 1 = land, 2 = pole hole
//! <dir>/<date>.bin     R*C little-endian f32, row-major, non-ocean = 0x7FC00000
//! ```

use std::fs;
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;

use super::{non_ocean_value, CellKind, GridArchive, Mask, SicGrid};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MASK_FILE: &str = "mask.bin";

const VERSION: u32 = 1;

pub fn write_archive(archive: &GridArchive, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for g in archive.grids() {
        g.validate()?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mask = archive.mask();
    let mask_bytes: Vec<u8> = mask.cells().iter().map(|c| c.code()).collect();
    let mask_path = dir.join(MASK_FILE);
    fs::write(&mask_path, &mask_bytes).map_err(|e| Error::io(&mask_path, e))?;

    let mut manifest = format!(
        "version={VERSION} rows={} cols={} cell_area_km2={}\n",
        mask.rows(),
        mask.cols(),
        archive.cell_area_km2
    );
    for (g, gap) in archive.grids().iter().zip(archive.gap_flags()) {
        let bytes = encode_values(g.values(), mask);
        let name = format!("{}.bin", g.date);
        let path = dir.join(&name);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{:08x}\t{}\n",
            g.date,
            name,
            bytes.len(),
            crc32fast::hash(&bytes),
            u8::from(*gap)
        ));
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

fn encode_values(values: &[f32], mask: &Mask) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for (v, c) in values.iter().zip(mask.cells()) {
        let v = if *c == CellKind::Ocean {
            *v
        } else {
            non_ocean_value()
        };
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Header {
    rows: usize,
    cols: usize,
    cell_area_km2: f64,
}

fn parse_header(line: &str) -> Result<Header> {
    let mut version = None;
    let mut rows = None;
    let mut cols = None;
    let mut area = None;
    for tok in line.split_whitespace() {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad manifest header token '{tok}'")))?;
        let bad = || Error::Format(format!("bad manifest header value '{tok}'"));
        match key {
            "version" => version = Some(value.parse::<u32>().map_err(|_| bad())?),
            "rows" => rows = Some(value.parse::<usize>().map_err(|_| bad())?),
            "cols" => cols = Some(value.parse::<usize>().map_err(|_| bad())?),
            "cell_area_km2" => area = Some(value.parse::<f64>().map_err(|_| bad())?),
            _ => {
                return Err(Error::Format(format!(
                    "unknown manifest header key '{key}'"
                )))
            }
        }
    }
    match (version, rows, cols, area) {
        (Some(VERSION), Some(rows), Some(cols), Some(cell_area_km2)) => Ok(Header {
            rows,
            cols,
            cell_area_km2,
        }),
        (Some(v), ..) if v != VERSION => Err(Error::Format(format!("unsupported version {v}"))),
        _ => Err(Error::Format(format!(
            "incomplete manifest header '{line}'"
        ))),
    }
}

struct Entry {
    date: NaiveDate,
    file: String,
    len: usize,
    crc: u32,
    gap: bool,
}

fn parse_entry(line: &str, lineno: usize) -> Result<Entry> {
    let fields: Vec<&str> = line.split('\t').collect();
    let bad = |what: &str| Error::Format(format!("manifest line {lineno}: bad {what} in '{line}'"));
    if fields.len() != 5 {
        return Err(bad("field count"));
    }
    Ok(Entry {
        date: fields[0].parse().map_err(|_| bad("date"))?,
        file: fields[1].to_string(),
        len: fields[2].parse().map_err(|_| bad("byte length"))?,
        crc: u32::from_str_radix(fields[3], 16).map_err(|_| bad("crc32"))?,
        gap: match fields[4] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("gap flag")),
        },
    })
}

pub fn read_archive(dir: impl AsRef<Path>) -> Result<GridArchive> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut lines = manifest.lines();
    let header = parse_header(
        lines
            .next()
            .ok_or_else(|| Error::Format("empty manifest".into()))?,
    )?;

    let mask_path = dir.join(MASK_FILE);
    let mask_bytes = fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
    if mask_bytes.len() != header.rows * header.cols {
        return Err(Error::Format(format!(
            "mask has {} bytes, expected {}x{}",
            mask_bytes.len(),
            header.rows,
            header.cols
        )));
    }
    let cells = mask_bytes
        .iter()
        .map(|&b| {
            CellKind::from_code(b).ok_or_else(|| Error::Format(format!("unknown mask code {b}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mask = Arc::new(Mask::new(header.rows, header.cols, cells)?);

    let expected_len = header.rows * header.cols * 4;
    let mut grids = Vec::new();
    let mut gaps = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let entry = parse_entry(line, i + 2)?;
        if entry.len != expected_len {
            return Err(Error::Format(format!(
                "{}: manifest length {} does not match grid shape {}x{}",
                entry.date, entry.len, header.rows, header.cols
            )));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::Load {
            date: entry.date,
            reason: format!("{}: {e}", path.display()),
        })?;
        if bytes.len() != entry.len {
            return Err(Error::Load {
                date: entry.date,
                reason: format!(
                    "file has {} bytes, manifest says {}",
                    bytes.len(),
                    entry.len
                ),
            });
        }
        let crc = crc32fast::hash(&bytes);
        if crc != entry.crc {
            return Err(Error::Load {
                date: entry.date,
                reason: format!(
                    "checksum {crc:08x} does not match manifest {:08x}",
                    entry.crc
                ),
            });
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let grid = SicGrid::new(entry.date, values, mask.clone()).map_err(|e| Error::Load {
            date: entry.date,
            reason: e.to_string(),
        })?;
        grids.push(grid);
        gaps.push(entry.gap);
    }
    GridArchive::new(mask, grids, gaps, header.cell_area_km2)
}
