//! On-disk formats: image volumes (`PIV1`), sinograms (`PSG1`), network
//! weights (`PNW1`), and plain CSV tables.
//!
//! Every format opens with a one-line text header; numeric payloads are
//! little-endian 64-bit floats. Writers emit canonical bytes so identical
//! data always produces identical files.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{NetworkConfig, NetworkWeights};
use crate::sinogram::Sinogram;
use crate::volume::{ActivityVolume, ImageGrid};

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn values_to_bytes(values: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn values_from_bytes(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != expected * 8 {
        return Err(format_err(
            path,
            format!(
                "expected {} bytes of payload for {expected} values, found {}",
                expected * 8,
                bytes.len()
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Split one `\n`-terminated header line off a byte buffer.
fn take_line<'a>(path: &Path, bytes: &'a [u8]) -> Result<(&'a str, &'a [u8])> {
    let pos = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| format_err(path, "missing newline-terminated header"))?;
    let line = std::str::from_utf8(&bytes[..pos])
        .map_err(|_| format_err(path, "header is not valid UTF-8"))?;
    Ok((line, &bytes[pos + 1..]))
}

fn parse_num<T: std::str::FromStr>(path: &Path, field: &str, token: &str) -> Result<T> {
    token
        .parse()
        .map_err(|_| format_err(path, format!("cannot parse {field} from '{token}'")))
}

/// Write a volume: header `PIV1 nx ny nz voxel_size`, then row-major
/// values (x fastest, then y, then slice).
pub fn write_volume(path: &Path, vol: &ActivityVolume) -> Result<()> {
    create_parent(path)?;
    let g = vol.grid;
    let mut out = format!("PIV1 {} {} {} {}\n", g.nx, g.ny, g.nz, g.voxel_size).into_bytes();
    out.extend_from_slice(&values_to_bytes(&vol.values));
    fs::write(path, out)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<ActivityVolume> {
    let bytes = fs::read(path)?;
    let (line, rest) = take_line(path, &bytes)?;
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != 5 || tokens[0] != "PIV1" {
        return Err(format_err(path, "header must be 'PIV1 nx ny nz voxel_size'"));
    }
    let grid = ImageGrid {
        nx: parse_num(path, "nx", tokens[1])?,
        ny: parse_num(path, "ny", tokens[2])?,
        nz: parse_num(path, "nz", tokens[3])?,
        voxel_size: parse_num(path, "voxel_size", tokens[4])?,
    };
    grid.validate()
        .map_err(|e| format_err(path, e.to_string()))?;
    let values = values_from_bytes(path, rest, grid.len())?;
    Ok(ActivityVolume { grid, values })
}

/// Write a sinogram: header `PSG1 n_slices n_angles n_bins`, then values
/// with radial bin fastest, then angle, then slice.
pub fn write_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    create_parent(path)?;
    let mut out = format!(
        "PSG1 {} {} {}\n",
        sino.n_slices, sino.n_angles, sino.n_bins
    )
    .into_bytes();
    out.extend_from_slice(&values_to_bytes(&sino.values));
    fs::write(path, out)?;
    Ok(())
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    let bytes = fs::read(path)?;
    let (line, rest) = take_line(path, &bytes)?;
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != 4 || tokens[0] != "PSG1" {
        return Err(format_err(
            path,
            "header must be 'PSG1 n_slices n_angles n_bins'",
        ));
    }
    let n_slices: usize = parse_num(path, "n_slices", tokens[1])?;
    let n_angles: usize = parse_num(path, "n_angles", tokens[2])?;
    let n_bins: usize = parse_num(path, "n_bins", tokens[3])?;
    if n_slices == 0 || n_angles == 0 || n_bins == 0 {
        return Err(format_err(path, "sinogram dimensions must be positive"));
    }
    let values = values_from_bytes(path, rest, n_slices * n_angles * n_bins)?;
    let mut sino = Sinogram::zeros(n_slices, n_angles, n_bins);
    sino.values = values;
    Ok(sino)
}

/// Canonical parameter enumeration of a network: per block, the kernel and
/// bias, then the four normalization buffers when present.
fn param_names(net: &NetworkWeights) -> Vec<(String, &'static str, usize)> {
    let mut out = Vec::new();
    for block in &net.blocks {
        out.push((block.name.clone(), "w", block.w.len()));
        out.push((block.name.clone(), "b", block.b.len()));
        if let Some(bn) = &block.bn {
            out.push((block.name.clone(), "gamma", bn.gamma.len()));
            out.push((block.name.clone(), "beta", bn.beta.len()));
            out.push((block.name.clone(), "mean", bn.running_mean.len()));
            out.push((block.name.clone(), "var", bn.running_var.len()));
        }
    }
    out
}

fn param_buffer<'a>(block: &'a mut crate::nn::network::ConvBlock, field: &str) -> Option<&'a mut Vec<f64>> {
    match field {
        "w" => Some(&mut block.w),
        "b" => Some(&mut block.b),
        "gamma" => block.bn.as_mut().map(|bn| &mut bn.gamma),
        "beta" => block.bn.as_mut().map(|bn| &mut bn.beta),
        "mean" => block.bn.as_mut().map(|bn| &mut bn.running_mean),
        "var" => block.bn.as_mut().map(|bn| &mut bn.running_var),
        _ => None,
    }
}

/// Write network weights: text manifest (`PNW1`, the architecture line,
/// one `param` line per buffer, `end`), then the buffers in listed order.
pub fn write_weights(path: &Path, net: &NetworkWeights) -> Result<()> {
    create_parent(path)?;
    let mut header = String::from("PNW1\n");
    header.push_str(&format!(
        "config {} {}",
        net.config.in_channels, net.config.kernel
    ));
    for c in &net.config.channels {
        header.push_str(&format!(" {c}"));
    }
    header.push('\n');
    for (name, field, len) in param_names(net) {
        header.push_str(&format!("param {name} {field} {len}\n"));
    }
    header.push_str("end\n");

    let mut out = header.into_bytes();
    for block in &net.blocks {
        out.extend_from_slice(&values_to_bytes(&block.w));
        out.extend_from_slice(&values_to_bytes(&block.b));
        if let Some(bn) = &block.bn {
            out.extend_from_slice(&values_to_bytes(&bn.gamma));
            out.extend_from_slice(&values_to_bytes(&bn.beta));
            out.extend_from_slice(&values_to_bytes(&bn.running_mean));
            out.extend_from_slice(&values_to_bytes(&bn.running_var));
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<NetworkWeights> {
    let bytes = fs::read(path)?;
    let (magic, mut rest) = take_line(path, &bytes)?;
    if magic != "PNW1" {
        return Err(format_err(path, "missing PNW1 magic line"));
    }
    let (config_line, r) = take_line(path, rest)?;
    rest = r;
    let tokens: Vec<&str> = config_line.split_whitespace().collect();
    if tokens.len() < 4 || tokens[0] != "config" {
        return Err(format_err(
            path,
            "architecture line must be 'config in_channels kernel channels...'",
        ));
    }
    let config = NetworkConfig {
        in_channels: parse_num(path, "in_channels", tokens[1])?,
        kernel: parse_num(path, "kernel", tokens[2])?,
        channels: tokens[3..]
            .iter()
            .map(|t| parse_num(path, "channel", t))
            .collect::<Result<_>>()?,
    };
    let mut net =
        NetworkWeights::zeros(&config).map_err(|e| format_err(path, e.to_string()))?;

    let mut declared: Vec<(String, String, usize)> = Vec::new();
    loop {
        let (line, r) = take_line(path, rest)?;
        rest = r;
        if line == "end" {
            break;
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 4 || t[0] != "param" {
            return Err(format_err(path, format!("unexpected manifest line '{line}'")));
        }
        declared.push((t[1].to_string(), t[2].to_string(), parse_num(path, "len", t[3])?));
    }

    let expected = param_names(&net);
    if declared.len() != expected.len() {
        return Err(format_err(
            path,
            format!(
                "weights list {} buffers but the architecture has {}",
                declared.len(),
                expected.len()
            ),
        ));
    }
    let mut offset = 0usize;
    for ((name, field, len), (want_name, want_field, want_len)) in
        declared.iter().zip(expected.iter())
    {
        if name != want_name || field != want_field || *len != *want_len {
            return Err(format_err(
                path,
                format!(
                    "buffer {name}.{field}[{len}] does not match expected {want_name}.{want_field}[{want_len}]"
                ),
            ));
        }
        let end = offset + len * 8;
        if end > rest.len() {
            return Err(format_err(path, "payload truncated"));
        }
        let values = values_from_bytes(path, &rest[offset..end], *len)?;
        let block = net
            .blocks
            .iter_mut()
            .find(|b| b.name == *name)
            .ok_or_else(|| format_err(path, format!("unknown block '{name}'")))?;
        let buf = param_buffer(block, field)
            .ok_or_else(|| format_err(path, format!("block '{name}' has no field '{field}'")))?;
        *buf = values;
        offset = end;
    }
    if offset != rest.len() {
        return Err(format_err(
            path,
            format!("{} trailing bytes after payload", rest.len() - offset),
        ));
    }
    Ok(net)
}

/// Write a CSV table with one header row. Values must not contain commas
/// or newlines; numeric cells use the shortest round-trip form.
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    create_parent(path)?;
    let columns = header.split(',').count();
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        if row.len() != columns {
            return Err(Error::Dimension(format!(
                "CSV row has {} cells, header has {columns}",
                row.len()
            )));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read the rows of a sweep-curve table `method,sweep_value,std,cr`.
pub fn read_curve_rows(path: &Path) -> Result<Vec<(String, f64, f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("method,sweep_value,std,cr") => {}
        _ => {
            return Err(format_err(
                path,
                "first line must be 'method,sweep_value,std,cr'",
            ))
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 {
            return Err(format_err(path, format!("malformed row '{line}'")));
        }
        rows.push((
            cells[0].to_string(),
            parse_num(path, "sweep_value", cells[1])?,
            parse_num(path, "std", cells[2])?,
            parse_num(path, "cr", cells[3])?,
        ));
    }
    Ok(rows)
}
