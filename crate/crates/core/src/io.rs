//! File formats: PGM images, raw float fields and the match configuration.
//!
//! Field files start with the magic line `LFM1`, followed by
//!
//! ```text
//! width=<int>
//! height=<int>
//! spacing=<decimal>
//! components=<1|2>
//! data:
//! ```
//!
//! and `width * height * components` little-endian `f32` values, row-major,
//! with `ux, uy` interleaved per pixel when `components=2`.
//!
//! Configuration files hold `key = value` lines, `#` comments and nested
//! `kernel { ... }` blocks:
//!
//! ```text
//! n_timesteps = 8
//! kernel {
//!   family = sum
//!   kernel {
//!     family = symmetrized
//!     c = 0.5
//!     kernel {
//!       family = gaussian
//!       sigma = 25
//!     }
//!   }
//!   kernel {
//!     family = gaussian
//!     sigma = 7
//!   }
//! }
//! ```
//!
//! Families are `gaussian` (`sigma`, optional `weight`), `sum` (child blocks,
//! optional `terms` count), `symmetrized` (`c`, one child) and `partition`
//! (children that each carry a `weights_file`).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flows::DeformationPath;
use crate::grid::{Deformation, Grid2D, Image, Mask, VectorField};
use crate::kernels::{KernelSpec, PartitionPart};
use crate::matching::MatchConfig;

const FIELD_MAGIC: &str = "LFM1\n";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- PGM

/// Splits the PGM header into magic, width, height, maxval and the payload
/// offset, skipping `#` comments.
fn pgm_header(bytes: &[u8]) -> Result<([u8; 2], usize, usize, usize, usize)> {
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'2' || bytes[1] == b'5') {
        return Err(Error::MalformedHeader("expected P2 or P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader("expected a decimal number".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::MalformedHeader("number out of range".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::MalformedHeader("missing whitespace after maxval".into())),
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::MalformedHeader(format!("maxval {maxval} out of range")));
    }
    Ok(([bytes[0], bytes[1]], w, h, maxval, pos))
}

/// Parses a P2 or P5 image; intensities are divided by maxval.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let (magic, w, h, maxval, pos) = pgm_header(bytes)?;
    let grid = Grid2D::new(w, h, 1.0).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let n = grid.len();
    let scale = maxval as f64;
    let payload = &bytes[pos..];
    let data: Vec<f64> = if magic[1] == b'5' {
        let bpp = if maxval > 255 { 2 } else { 1 };
        if payload.len() < n * bpp {
            return Err(Error::TruncatedPayload {
                expected: n * bpp,
                found: payload.len(),
            });
        }
        if bpp == 1 {
            payload[..n].iter().map(|&b| b as f64 / scale).collect()
        } else {
            payload[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
                .collect()
        }
    } else {
        let text = std::str::from_utf8(payload)
            .map_err(|_| Error::MalformedHeader("P2 payload is not ASCII".into()))?;
        let mut values = Vec::with_capacity(n);
        for tok in text.split_ascii_whitespace().take(n) {
            let v: usize = tok
                .parse()
                .map_err(|_| Error::MalformedHeader(format!("bad sample `{tok}`")))?;
            if v > maxval {
                return Err(Error::MalformedHeader(format!("sample {v} above maxval {maxval}")));
            }
            values.push(v as f64 / scale);
        }
        if values.len() < n {
            return Err(Error::TruncatedPayload {
                expected: n,
                found: values.len(),
            });
        }
        values
    };
    Image::new(grid, data)
}

/// Binary P5 with maxval 255. Values are clamped to `[0, 1]` and rounded to
/// the nearest level, ties going down.
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let g = img.grid();
    let mut out = format!("P5\n{} {}\n255\n", g.width(), g.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| {
        let level = (v.clamp(0.0, 1.0) * 255.0 - 0.5).ceil();
        level.clamp(0.0, 255.0) as u8
    }));
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    decode_pgm(&read_bytes(path.as_ref())?)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pgm(img))
}

// ---------------------------------------------------------------- fields

/// Decoded field file: grid, component count and the raw samples.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldFile {
    pub grid: Grid2D,
    pub components: usize,
    /// Interleaved samples, `width * height * components` of them.
    pub data: Vec<f32>,
}

impl FieldFile {
    pub fn from_image(img: &Image) -> Self {
        Self {
            grid: *img.grid(),
            components: 1,
            data: img.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_field(field: &VectorField) -> Self {
        let data = field
            .ux()
            .iter()
            .zip(field.uy())
            .flat_map(|(&x, &y)| [x as f32, y as f32])
            .collect();
        Self {
            grid: *field.grid(),
            components: 2,
            data,
        }
    }

    pub fn into_image(self) -> Result<Image> {
        if self.components != 1 {
            return Err(Error::HeaderMismatch(format!(
                "expected a scalar field, file has {} components",
                self.components
            )));
        }
        Image::new(self.grid, self.data.into_iter().map(f64::from).collect())
    }

    pub fn into_field(self) -> Result<VectorField> {
        if self.components != 2 {
            return Err(Error::HeaderMismatch(format!(
                "expected a vector field, file has {} components",
                self.components
            )));
        }
        let ux = self.data.iter().step_by(2).map(|&v| f64::from(v)).collect();
        let uy = self.data.iter().skip(1).step_by(2).map(|&v| f64::from(v)).collect();
        VectorField::new(self.grid, ux, uy)
    }

    pub fn encode(&self) -> Vec<u8> {
        let g = &self.grid;
        let mut out = format!(
            "{FIELD_MAGIC}width={}\nheight={}\nspacing={}\ncomponents={}\ndata:\n",
            g.width(),
            g.height(),
            g.spacing(),
            self.components
        )
        .into_bytes();
        out.reserve(4 * self.data.len());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(FIELD_MAGIC.as_bytes())
            .ok_or(Error::BadMagic { expected: "LFM1" })?;
        let mut pos = 0;
        let mut line = |key: &str| -> Result<&str> {
            let end = rest[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::MalformedHeader(format!("missing `{key}` line")))?;
            let text = std::str::from_utf8(&rest[pos..pos + end])
                .map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))?;
            pos += end + 1;
            text.strip_prefix(key)
                .ok_or_else(|| Error::MalformedHeader(format!("expected `{key}`, got `{text}`")))
        };
        let int = |s: &str, key: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::MalformedHeader(format!("bad {key} `{s}`")))
        };
        let width = int(line("width=")?, "width")?;
        let height = int(line("height=")?, "height")?;
        let spacing_text = line("spacing=")?;
        let spacing: f64 = spacing_text
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("bad spacing `{spacing_text}`")))?;
        let components = int(line("components=")?, "components")?;
        let tail = line("data:")?;
        if !tail.is_empty() {
            return Err(Error::MalformedHeader("trailing text after `data:`".into()));
        }
        if !(components == 1 || components == 2) {
            return Err(Error::HeaderMismatch(format!("components={components}")));
        }
        let grid =
            Grid2D::new(width, height, spacing).map_err(|e| Error::HeaderMismatch(e.to_string()))?;
        let payload = &rest[pos..];
        let expected = 4 * grid.len() * components;
        if payload.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::HeaderMismatch(format!(
                "payload has {} bytes, header declares {expected}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            grid,
            components,
            data,
        })
    }
}

pub fn read_field_file(path: impl AsRef<Path>) -> Result<FieldFile> {
    FieldFile::decode(&read_bytes(path.as_ref())?)
}

pub fn write_field_file(path: impl AsRef<Path>, file: &FieldFile) -> Result<()> {
    write_bytes(path.as_ref(), &file.encode())
}

pub fn read_field(path: impl AsRef<Path>) -> Result<VectorField> {
    read_field_file(path)?.into_field()
}

pub fn write_field(path: impl AsRef<Path>, field: &VectorField) -> Result<()> {
    write_field_file(path, &FieldFile::from_field(field))
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<Image> {
    read_field_file(path)?.into_image()
}

pub fn write_scalar(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    write_field_file(path, &FieldFile::from_image(img))
}

/// Reads a scalar image from a `.pgm` file or a one-component field file.
pub fn read_image_any(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        read_pgm(path)
    } else {
        read_scalar(path)
    }
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Mask::from_image(&read_image_any(path)?)
}

/// `<prefix>_<k>.field` with a three-digit index.
pub fn indexed_path(prefix: &str, k: usize) -> PathBuf {
    PathBuf::from(format!("{prefix}_{k:03}.field"))
}

/// Writes `fields[k]` to `<prefix>_<k>.field`.
pub fn write_field_sequence(prefix: &str, fields: &[VectorField]) -> Result<()> {
    for (k, f) in fields.iter().enumerate() {
        write_field(indexed_path(prefix, k), f)?;
    }
    Ok(())
}

/// Reads `<prefix>_000.field, <prefix>_001.field, ...` up to the first gap.
pub fn read_field_sequence(prefix: &str) -> Result<Vec<VectorField>> {
    let mut out = Vec::new();
    loop {
        let path = indexed_path(prefix, out.len());
        if !path.exists() {
            break;
        }
        out.push(read_field(&path)?);
    }
    if out.is_empty() {
        let path = indexed_path(prefix, 0);
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    Ok(out)
}

/// Snapshots `k = 0..=N` as displacement fields.
pub fn write_deformation_path(prefix: &str, path: &DeformationPath) -> Result<()> {
    let fields: Vec<VectorField> = path
        .snapshots()
        .iter()
        .map(|d| d.displacement().clone())
        .collect();
    write_field_sequence(prefix, &fields)
}

pub fn read_deformation_path(prefix: &str) -> Result<DeformationPath> {
    let snaps = read_field_sequence(prefix)?
        .into_iter()
        .map(Deformation::from_displacement)
        .collect();
    DeformationPath::new(snaps)
}

// ---------------------------------------------------------------- config

#[derive(Debug, Default)]
struct Block {
    line: usize,
    family: Option<(usize, String)>,
    sigma: Option<(usize, f64)>,
    weight: Option<(usize, f64)>,
    c: Option<(usize, f64)>,
    terms: Option<(usize, usize)>,
    weights_file: Option<(usize, String)>,
    children: Vec<Block>,
}

fn bad_value(line: usize, key: &str, reason: impl Into<String>) -> Error {
    Error::BadValue {
        line,
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse_real(line: usize, key: &str, v: &str) -> Result<f64> {
    let x: f64 = v
        .parse()
        .map_err(|_| bad_value(line, key, format!("`{v}` is not a number")))?;
    if !x.is_finite() {
        return Err(bad_value(line, key, "must be finite"));
    }
    Ok(x)
}

fn parse_positive(line: usize, key: &str, v: &str) -> Result<f64> {
    let x = parse_real(line, key, v)?;
    if x <= 0.0 {
        return Err(bad_value(line, key, "must be positive"));
    }
    Ok(x)
}

fn parse_count(line: usize, key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| bad_value(line, key, format!("`{v}` is not a nonnegative integer")))
}

fn block_key(block: &mut Block, line: usize, key: &str, value: &str) -> Result<()> {
    match key {
        "family" => block.family = Some((line, value.to_string())),
        "sigma" => block.sigma = Some((line, parse_positive(line, key, value)?)),
        "weight" => block.weight = Some((line, parse_positive(line, key, value)?)),
        "c" => {
            let c = parse_real(line, key, value)?;
            if !(0.0..=1.0).contains(&c) {
                return Err(bad_value(line, key, format!("{c} is outside [0, 1]")));
            }
            block.c = Some((line, c));
        }
        "terms" => block.terms = Some((line, parse_count(line, key, value)?)),
        "weights_file" => block.weights_file = Some((line, value.to_string())),
        _ => {
            return Err(Error::UnknownKey {
                line,
                key: key.to_string(),
            })
        }
    }
    Ok(())
}

fn unexpected(line: usize, key: &str, family: &str) -> Error {
    bad_value(line, key, format!("not a parameter of family `{family}`"))
}

fn build_kernel(block: Block, in_partition: bool) -> Result<KernelSpec> {
    let Some((fline, family)) = block.family else {
        return Err(bad_value(block.line, "family", "kernel block has no family"));
    };
    if !in_partition {
        if let Some((line, _)) = block.weights_file {
            return Err(bad_value(line, "weights_file", "only allowed inside a partition"));
        }
    }
    let only = |allowed: &[&str]| -> Result<()> {
        let present = [
            ("sigma", block.sigma.map(|s| s.0)),
            ("weight", block.weight.map(|s| s.0)),
            ("c", block.c.map(|s| s.0)),
            ("terms", block.terms.map(|s| s.0)),
        ];
        for (key, line) in present {
            if let Some(line) = line {
                if !allowed.contains(&key) {
                    return Err(unexpected(line, key, &family));
                }
            }
        }
        Ok(())
    };
    let kernel = match family.as_str() {
        "gaussian" => {
            only(&["sigma", "weight"])?;
            if !block.children.is_empty() {
                return Err(bad_value(block.line, "kernel", "gaussian takes no nested kernels"));
            }
            let (_, sigma) = block
                .sigma
                .ok_or_else(|| bad_value(block.line, "sigma", "missing"))?;
            let weight = block.weight.map_or(1.0, |w| w.1);
            KernelSpec::Gaussian { sigma, weight }
        }
        "sum" => {
            only(&["terms"])?;
            if block.children.is_empty() {
                return Err(bad_value(block.line, "kernel", "sum needs nested kernels"));
            }
            if let Some((line, n)) = block.terms {
                if n != block.children.len() {
                    return Err(bad_value(
                        line,
                        "terms",
                        format!("declares {n} terms, block has {}", block.children.len()),
                    ));
                }
            }
            KernelSpec::Sum(
                block
                    .children
                    .into_iter()
                    .map(|b| build_kernel(b, false))
                    .collect::<Result<_>>()?,
            )
        }
        "symmetrized" => {
            only(&["c"])?;
            let (_, c) = block.c.ok_or_else(|| bad_value(block.line, "c", "missing"))?;
            let mut children = block.children;
            if children.len() != 1 {
                return Err(bad_value(block.line, "kernel", "symmetrized wraps exactly one kernel"));
            }
            KernelSpec::Symmetrized {
                c,
                inner: Box::new(build_kernel(children.remove(0), false)?),
            }
        }
        "partition" => {
            only(&[])?;
            if block.children.is_empty() {
                return Err(bad_value(block.line, "kernel", "partition needs nested kernels"));
            }
            let mut parts = Vec::with_capacity(block.children.len());
            for child in block.children {
                let cline = child.line;
                let Some((wline, file)) = child.weights_file.clone() else {
                    return Err(bad_value(cline, "weights_file", "missing in partition part"));
                };
                let weights = read_image_any(&file)
                    .map_err(|e| bad_value(wline, "weights_file", e.to_string()))?;
                let kernel = build_kernel(child, true)?;
                parts.push(PartitionPart { weights, kernel });
            }
            let k = KernelSpec::Partition(parts);
            k.validate()
                .map_err(|e| bad_value(block.line, "kernel", e.to_string()))?;
            k
        }
        other => return Err(bad_value(fline, "family", format!("unknown family `{other}`"))),
    };
    Ok(kernel)
}

/// Parses configuration text. File references are resolved against the
/// current directory.
pub fn parse_config_str(text: &str) -> Result<MatchConfig> {
    let mut kernel: Option<Block> = None;
    let mut stack: Vec<Block> = Vec::new();
    let mut top: Vec<(usize, String, String)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content == "}" {
            let Some(done) = stack.pop() else {
                return Err(bad_value(line, "}", "unbalanced closing brace"));
            };
            match stack.last_mut() {
                Some(parent) => parent.children.push(done),
                None => kernel = Some(done),
            }
            continue;
        }
        if let Some(name) = content.strip_suffix('{') {
            let name = name.trim();
            if name != "kernel" {
                return Err(Error::UnknownKey {
                    line,
                    key: name.to_string(),
                });
            }
            if stack.is_empty() && kernel.is_some() {
                return Err(bad_value(line, "kernel", "only one top-level kernel block"));
            }
            stack.push(Block {
                line,
                ..Block::default()
            });
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(bad_value(line, content, "expected `key = value`"));
        };
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            return Err(bad_value(line, key, "empty value"));
        }
        match stack.last_mut() {
            Some(block) => block_key(block, line, key, value)?,
            None => top.push((line, key.to_string(), value.to_string())),
        }
    }
    if let Some(open) = stack.last() {
        return Err(bad_value(open.line, "kernel", "block is never closed"));
    }
    let kernel = build_kernel(kernel.ok_or(Error::MissingKernel)?, false)?;
    let mut cfg = MatchConfig::new(kernel);
    for (line, key, value) in top {
        let v = value.as_str();
        match key.as_str() {
            "n_timesteps" => {
                cfg.n_timesteps = parse_count(line, &key, v)?;
                if cfg.n_timesteps == 0 {
                    return Err(bad_value(line, &key, "must be at least 1"));
                }
            }
            "sim_weight" => cfg.sim_weight = parse_positive(line, &key, v)?,
            "max_iters" => cfg.max_iters = parse_count(line, &key, v)?,
            "step_init" => cfg.step_init = parse_positive(line, &key, v)?,
            "step_shrink" => {
                let s = parse_real(line, &key, v)?;
                if !(s > 0.0 && s < 1.0) {
                    return Err(bad_value(line, &key, "must lie in (0, 1)"));
                }
                cfg.step_shrink = s;
            }
            "tol_grad" => cfg.tol_grad = parse_positive(line, &key, v)?,
            "mask_file" => {
                cfg.mask = Some(read_mask(v).map_err(|e| bad_value(line, &key, e.to_string()))?)
            }
            "momentum_mask_file" => {
                cfg.momentum_mask =
                    Some(read_mask(v).map_err(|e| bad_value(line, &key, e.to_string()))?)
            }
            _ => return Err(Error::UnknownKey { line, key }),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<MatchConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

/// Inverse of [`parse_config_str`] for configurations without file references.
pub fn format_kernel(kernel: &KernelSpec) -> Option<String> {
    fn emit(k: &KernelSpec, depth: usize, out: &mut String) -> Option<()> {
        let pad = "  ".repeat(depth);
        out.push_str(&format!("{pad}kernel {{\n"));
        match k {
            KernelSpec::Gaussian { sigma, weight } => {
                out.push_str(&format!("{pad}  family = gaussian\n{pad}  sigma = {sigma}\n"));
                if *weight != 1.0 {
                    out.push_str(&format!("{pad}  weight = {weight}\n"));
                }
            }
            KernelSpec::Sum(terms) => {
                out.push_str(&format!("{pad}  family = sum\n"));
                for t in terms {
                    emit(t, depth + 1, out)?;
                }
            }
            KernelSpec::Symmetrized { c, inner } => {
                out.push_str(&format!("{pad}  family = symmetrized\n{pad}  c = {c}\n"));
                emit(inner, depth + 1, out)?;
            }
            KernelSpec::Partition(_) => return None,
        }
        out.push_str(&format!("{pad}}}\n"));
        Some(())
    }
    let mut out = String::new();
    emit(kernel, 0, &mut out)?;
    Some(out)
}
