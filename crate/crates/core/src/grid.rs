//! Dense latent/image grids, binary masks and the seeded Gaussian stream.
//!
//! Layout is row-major with height outermost, then width, then channel. A
//! mask is a single-channel `h x w` plane broadcast over every channel.

use std::fmt::{self, Write as _};
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims {
    pub fn new(h: usize, w: usize, c: usize) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidRange(format!(
                "grid dimensions must be positive, got {h}x{w}x{c}"
            )));
        }
        Ok(Self { h, w, c })
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    dims: Dims,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        let dims = Dims::new(h, w, c)?;
        if data.len() != dims.len() {
            return Err(Error::dims(
                format!("{} values", dims.len()),
                format!("{} values", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidRange(format!(
                "non-finite grid value at index {i}"
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Result<Self> {
        let dims = Dims::new(h, w, c)?;
        Ok(Self {
            dims,
            data: vec![value; dims.len()],
        })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Result<Self> {
        Self::filled(h, w, c, 0.0)
    }

    pub(crate) fn from_parts(dims: Dims, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.len(), data.len());
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn height(&self) -> usize {
        self.dims.h
    }

    pub fn width(&self) -> usize {
        self.dims.w
    }

    pub fn channels(&self) -> usize {
        self.dims.c
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.dims.w + x) * self.dims.c + ch
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.index(y, x, ch)]
    }

    pub fn set(&mut self, y: usize, x: usize, ch: usize, value: f64) {
        let i = self.index(y, x, ch);
        self.data[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_dims(&self, other: &LatentGrid) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::dims(self.dims, other.dims));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentGrid {
        Self::from_parts(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> Result<LatentGrid> {
        self.ensure_same_dims(other)?;
        Ok(Self::from_parts(
            self.dims,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn scale(&self, k: f64) -> LatentGrid {
        self.map(|v| v * k)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64;
        var.sqrt()
    }

    pub fn rmse(&self, other: &LatentGrid) -> Result<f64> {
        self.ensure_same_dims(other)?;
        let ss: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok((ss / self.data.len() as f64).sqrt())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

/// Arithmetic mean over every entry.
pub fn mean_stat(g: &LatentGrid) -> f64 {
    g.mean()
}

/// `m * a + (1 - m) * b`, mask broadcast over channels.
pub fn masked_combine(a: &LatentGrid, b: &LatentGrid, m: &Mask) -> Result<LatentGrid> {
    a.ensure_same_dims(b)?;
    m.ensure_matches(a.dims())?;
    let c = a.channels();
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .enumerate()
        .map(|(i, (&x, &y))| if m.data[i / c] { x } else { y })
        .collect();
    Ok(LatentGrid::from_parts(a.dims(), data))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, values: &[u8]) -> Result<Self> {
        Dims::new(h, w, 1)?;
        if values.len() != h * w {
            return Err(Error::dims(
                format!("{} mask values", h * w),
                format!("{} mask values", values.len()),
            ));
        }
        let data = values
            .iter()
            .enumerate()
            .map(|(i, &v)| match v {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::InvalidRange(format!(
                    "mask value {v} at index {i} is not 0 or 1"
                ))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        Dims::new(h, w, 1)?;
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Ok(Self { h, w, data })
    }

    pub fn ones(h: usize, w: usize) -> Result<Self> {
        Self::from_fn(h, w, |_, _| true)
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Self::from_fn(h, w, |_, _| false)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    /// Whether the grid element at flat index `i` of a `c`-channel grid is editable.
    #[inline]
    pub fn at_element(&self, i: usize, c: usize) -> bool {
        self.data[i / c]
    }

    pub fn is_all_ones(&self) -> bool {
        self.data.iter().all(|&v| v)
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn ensure_matches(&self, dims: Dims) -> Result<()> {
        if self.h != dims.h || self.w != dims.w {
            return Err(Error::dims(
                format!("{}x{} mask", dims.h, dims.w),
                format!("{}x{} mask", self.h, self.w),
            ));
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

/// Seeded standard-normal stream: ChaCha8 uniforms fed through Box-Muller.
///
/// Draws are consumed in pairs; the second value of each pair is cached.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
    spare: Option<f64>,
    drawn: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::derived(seed, 0)
    }

    /// Independent stream for `(seed, run_id)`.
    pub fn derived(seed: u64, run_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(run_id);
        Self {
            seed,
            stream: run_id,
            rng,
            spare: None,
            drawn: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Number of normal variates drawn so far.
    pub fn position(&self) -> u64 {
        self.drawn
    }

    /// Uniform on the half-open interval (0, 1].
    pub fn uniform(&mut self) -> f64 {
        let bits = self.rng.next_u64() >> 11;
        (bits as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        // n is tiny in practice; modulo bias is below 2^-50
        (self.rng.next_u64() % n as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        self.drawn += 1;
        if let Some(v) = self.spare.take() {
            return v;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }
}

/// Grid of i.i.d. standard normals.
pub fn gaussian_grid(rng: &mut RngStream, h: usize, w: usize, c: usize) -> Result<LatentGrid> {
    let dims = Dims::new(h, w, c)?;
    Ok(gaussian_like(rng, dims))
}

pub(crate) fn gaussian_like(rng: &mut RngStream, dims: Dims) -> LatentGrid {
    let mut data = vec![0.0; dims.len()];
    rng.fill_normal(&mut data);
    LatentGrid::from_parts(dims, data)
}

// ---------------------------------------------------------------------------
// Text format
// ---------------------------------------------------------------------------

impl fmt::Display for LatentGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let Dims { h, w, c } = self.dims;
        writeln!(f, "GRID {h} {w} {c}")?;
        let mut line = String::new();
        for row in self.data.chunks(w * c) {
            line.clear();
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{v:.16e}")?;
            }
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "MASK {} {}", self.h, self.w)?;
        for row in self.data.chunks(self.w) {
            let line: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

impl std::str::FromStr for LatentGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut tokens = Tokens::new(s);
        let grid = tokens.grid()?;
        tokens.expect_end()?;
        Ok(grid)
    }
}

impl std::str::FromStr for Mask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut tokens = Tokens::new(s);
        let mask = tokens.mask()?;
        tokens.expect_end()?;
        Ok(mask)
    }
}

const BLOCK_KEYWORDS: [&str; 3] = ["GRID", "MASK", "PARAM"];

/// Whitespace tokenizer that remembers line numbers and per-line token index,
/// both 1-based.
pub(crate) struct Tokens<'a> {
    items: Vec<(usize, usize, &'a str)>,
    next: usize,
}

impl<'a> Tokens<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        let items = text
            .lines()
            .enumerate()
            .flat_map(|(ln, line)| {
                line.split_whitespace()
                    .enumerate()
                    .map(move |(pos, tok)| (ln + 1, pos + 1, tok))
            })
            .collect();
        Self { items, next: 0 }
    }

    fn error_here(&self, message: impl Into<String>) -> Error {
        let (line, position) = match self.items.get(self.next) {
            Some(&(l, p, _)) => (l, p),
            None => self
                .items
                .last()
                .map(|&(l, p, _)| (l, p + 1))
                .unwrap_or((1, 1)),
        };
        Error::Parse {
            line,
            position,
            message: message.into(),
        }
    }

    pub(crate) fn is_done(&self) -> bool {
        self.next >= self.items.len()
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if self.is_done() {
            Ok(())
        } else {
            Err(self.error_here("unexpected trailing token"))
        }
    }

    pub(crate) fn word(&mut self, what: &str) -> Result<&'a str> {
        match self.items.get(self.next) {
            Some(&(_, _, tok)) => {
                self.next += 1;
                Ok(tok)
            }
            None => Err(self.error_here(format!("expected {what}, found end of input"))),
        }
    }

    pub(crate) fn keyword(&mut self, kw: &str) -> Result<()> {
        let save = self.next;
        let tok = self.word(kw)?;
        if tok != kw {
            self.next = save;
            return Err(self.error_here(format!("expected `{kw}`, found `{tok}`")));
        }
        Ok(())
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let save = self.next;
        let tok = self.word(what)?;
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => {
                self.next = save;
                Err(self.error_here(format!("{what} must be a positive integer, found `{tok}`")))
            }
        }
    }

    /// Collects `n` value tokens, stopping early at a block keyword.
    fn values(&mut self, n: usize, what: &str) -> Result<Vec<&'a str>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            match self.items.get(self.next) {
                Some(&(_, _, tok)) if !BLOCK_KEYWORDS.contains(&tok) => {
                    out.push(tok);
                    self.next += 1;
                }
                _ => {
                    return Err(self.error_here(format!(
                        "{what} header declares {n} values, found {}",
                        out.len()
                    )))
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn grid(&mut self) -> Result<LatentGrid> {
        self.keyword("GRID")?;
        let h = self.dim("height")?;
        let w = self.dim("width")?;
        let c = self.dim("channels")?;
        let n = h * w * c;
        let start = self.next;
        let raw = self.values(n, "GRID")?;
        let mut data = Vec::with_capacity(n);
        for (k, tok) in raw.iter().enumerate() {
            let v: f64 = tok.parse().map_err(|_| {
                self.parse_error_at(start + k, format!("`{tok}` is not a decimal number"))
            })?;
            if !v.is_finite() {
                return Err(self.parse_error_at(start + k, "non-finite value"));
            }
            data.push(v);
        }
        if let Some(&(_, _, tok)) = self.items.get(self.next) {
            if !BLOCK_KEYWORDS.contains(&tok) {
                return Err(self.error_here(format!(
                    "GRID header declares {n} values, found more"
                )));
            }
        }
        Ok(LatentGrid::from_parts(Dims { h, w, c }, data))
    }

    pub(crate) fn mask(&mut self) -> Result<Mask> {
        self.keyword("MASK")?;
        let h = self.dim("height")?;
        let w = self.dim("width")?;
        let start = self.next;
        let raw = self.values(h * w, "MASK")?;
        let mut data = Vec::with_capacity(h * w);
        for (k, tok) in raw.iter().enumerate() {
            data.push(match *tok {
                "0" => false,
                "1" => true,
                _ => return Err(self.parse_error_at(start + k, format!("mask value `{tok}` is not 0 or 1"))),
            });
        }
        if let Some(&(_, _, tok)) = self.items.get(self.next) {
            if !BLOCK_KEYWORDS.contains(&tok) {
                return Err(self.error_here(format!("MASK header declares {} values, found more", h * w)));
            }
        }
        Ok(Mask { h, w, data })
    }

    fn parse_error_at(&self, idx: usize, message: impl Into<String>) -> Error {
        let (line, position, _) = self.items[idx];
        Error::Parse {
            line,
            position,
            message: message.into(),
        }
    }
}
