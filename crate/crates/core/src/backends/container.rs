//! Little-endian binary containers for latents, attention stacks, patch
//! trajectories and masks. Layout is documented in `docs/latents.md`.

use std::fs;
use std::path::Path;

use crate::attention::{AttentionLayer, AttentionStack, SoftMask};
use crate::detector::{PatchEmbeddings, PatchSource};
use crate::diffusion::LatentState;
use crate::error::{Error, Result};
use crate::numerics::{EmbeddingVector, ScalarField};

const MAGIC: &[u8; 4] = b"AMCR";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum Kind {
    Latents = 1,
    Attention = 2,
    Trajectory = 3,
    Masks = 4,
}

/// Patch embeddings of one denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub t: usize,
    pub patches: PatchEmbeddings,
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(kind: Kind) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.0.push(kind as u8);
        w.0.push(0);
        w
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::contract(format!("{v} does not fit the container's u32 fields")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn string(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn finish(self, path: &Path) -> Result<()> {
        fs::write(path, self.0)?;
        Ok(())
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path, bytes: &'a [u8], kind: Kind) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.invalid("not an AMCR container (bad magic)"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("two bytes"));
        if version != VERSION {
            return Err(r.invalid(format!("unsupported container version {version}")));
        }
        let found = r.take(2)?[0];
        if found != kind as u8 {
            return Err(r.invalid(format!("expected container kind {}, found {found}", kind as u8)));
        }
        Ok(r)
    }

    fn invalid(&self, msg: impl Into<String>) -> Error {
        Error::validation(self.path, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            self.invalid(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.invalid("length overflow"))?)?;
        let out: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(self.invalid("non-finite value in payload"));
        }
        Ok(out)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.invalid("label is not UTF-8"))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.invalid(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }

    /// Re-labels a type-invariant failure with the file it came from.
    fn check<T>(&self, r: Result<T>) -> Result<T> {
        r.map_err(|e| self.invalid(e.to_string()))
    }
}

fn load(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::validation(path, format!("cannot read: {e}")))
}

/// Writes latents sharing one shape, each tagged with its `step`.
pub fn write_latents(path: &Path, latents: &[LatentState]) -> Result<()> {
    let first = latents.first().ok_or_else(|| Error::contract("no latents to write"))?;
    let mut w = Writer::new(Kind::Latents);
    w.u32(latents.len())?;
    let (c, h, wd) = first.shape();
    w.u32(c)?;
    w.u32(h)?;
    w.u32(wd)?;
    for z in latents {
        first.check_same_shape(z)?;
        w.u32(z.step)?;
        w.f64s(z.values());
    }
    w.finish(path)
}

pub fn read_latents(path: &Path) -> Result<Vec<LatentState>> {
    let bytes = load(path)?;
    let mut r = Reader::open(path, &bytes, Kind::Latents)?;
    let n = r.u32()?;
    let (c, h, w) = (r.u32()?, r.u32()?, r.u32()?);
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let step = r.u32()?;
        let values = r.f64s(c * h * w)?;
        let z = r.check(LatentState::new(c, w, h, values, step))?;
        out.push(z);
    }
    r.finish()?;
    Ok(out)
}

pub fn write_attention(path: &Path, stack: &AttentionStack) -> Result<()> {
    stack.validate()?;
    let mut w = Writer::new(Kind::Attention);
    w.u32(stack.step)?;
    w.u32(stack.tokens())?;
    for label in &stack.token_labels {
        w.string(label)?;
    }
    w.u32(stack.layers.len())?;
    for layer in &stack.layers {
        w.u32(layer.heads.len())?;
        w.u32(layer.height)?;
        w.u32(layer.width)?;
        for head in &layer.heads {
            w.f64s(head);
        }
    }
    w.finish(path)
}

pub fn read_attention(path: &Path) -> Result<AttentionStack> {
    let bytes = load(path)?;
    let mut r = Reader::open(path, &bytes, Kind::Attention)?;
    let step = r.u32()?;
    let tokens = r.u32()?;
    let labels = (0..tokens).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let (heads, h, w) = (r.u32()?, r.u32()?, r.u32()?);
        let data = (0..heads).map(|_| r.f64s(h * w * tokens)).collect::<Result<Vec<_>>>()?;
        layers.push(r.check(AttentionLayer::new(w, h, tokens, data))?);
    }
    let stack = r.check(AttentionStack::new(layers, labels, step))?;
    r.finish()?;
    Ok(stack)
}

pub fn write_trajectory(path: &Path, steps: &[TrajectoryStep]) -> Result<()> {
    let first = steps.first().ok_or_else(|| Error::contract("no trajectory steps to write"))?;
    let mut w = Writer::new(Kind::Trajectory);
    w.u32(steps.len())?;
    w.u32(first.patches.height)?;
    w.u32(first.patches.width)?;
    w.u32(first.patches.dim())?;
    w.0.push(match first.patches.source {
        PatchSource::Generated => 0,
        PatchSource::Reference => 1,
    });
    for s in steps {
        let p = &s.patches;
        if (p.width, p.height, p.dim(), p.source)
            != (first.patches.width, first.patches.height, first.patches.dim(), first.patches.source)
        {
            return Err(Error::ShapeMismatch("trajectory steps differ in grid, dimension or source".into()));
        }
        w.u32(s.t)?;
        for e in &p.patches {
            w.f64s(e.as_slice());
        }
    }
    w.finish(path)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryStep>> {
    let bytes = load(path)?;
    let mut r = Reader::open(path, &bytes, Kind::Trajectory)?;
    let n = r.u32()?;
    let (h, w, dim) = (r.u32()?, r.u32()?, r.u32()?);
    let source = match r.take(1)?[0] {
        0 => PatchSource::Generated,
        1 => PatchSource::Reference,
        other => return Err(r.invalid(format!("unknown patch source tag {other}"))),
    };
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let t = r.u32()?;
        let flat = r.f64s(h * w * dim)?;
        let patches = if dim == 0 {
            Vec::new()
        } else {
            flat.chunks(dim)
                .map(|c| EmbeddingVector::new(c.to_vec()))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| r.invalid(e.to_string()))?
        };
        let patches = r.check(PatchEmbeddings::new(w, h, patches, source))?;
        out.push(TrajectoryStep { t, patches });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_masks(path: &Path, masks: &[SoftMask]) -> Result<()> {
    let first = masks.first().ok_or_else(|| Error::contract("no masks to write"))?;
    let (h, wd) = (first.field.height(), first.field.width());
    let mut w = Writer::new(Kind::Masks);
    w.u32(masks.len())?;
    w.u32(h)?;
    w.u32(wd)?;
    for m in masks {
        if (m.field.height(), m.field.width()) != (h, wd) {
            return Err(Error::ShapeMismatch("masks differ in grid size".into()));
        }
        w.u32(m.step)?;
        w.f64s(m.field.values());
    }
    w.finish(path)
}

pub fn read_masks(path: &Path) -> Result<Vec<SoftMask>> {
    let bytes = load(path)?;
    let mut r = Reader::open(path, &bytes, Kind::Masks)?;
    let n = r.u32()?;
    let (h, w) = (r.u32()?, r.u32()?);
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let step = r.u32()?;
        let values = r.f64s(h * w)?;
        let field = r.check(ScalarField::new(w, h, values))?;
        out.push(r.check(SoftMask::new(field, step))?);
    }
    r.finish()?;
    Ok(out)
}
