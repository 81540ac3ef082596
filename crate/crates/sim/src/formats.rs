//! Binary containers for pilots, LMMSE statistics and checkpoints.
//!
//! Every container starts with an 8-byte magic string and a little-endian
//! `u32` format version. Numbers are little-endian throughout; complex
//! entries are stored as interleaved `(re, im)` pairs of `f64` in row-major
//! order. Files are written to a temporary sibling and renamed into place.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use irs_core::gnn::{Dimensions, EstimationNet, FeatureScaling, Gnn, InputMode};
use irs_core::lmmse::ChannelStatistics;
use irs_core::pilot::{make_pilot_matrix, PilotPlan, ReceivedPilots};
use irs_core::train::{Checkpoint, ModelKind, TrainingConfig};
use irs_core::{CMatrix, GnnConfig, GnnParameters, C64};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::spec::ExperimentSpec;

pub const PILOTS_MAGIC: &[u8; 8] = b"IRSPILOT";
pub const STATS_MAGIC: &[u8; 8] = b"IRSSTATS";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IRSCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Write through `body` into a temporary file next to `path`, then rename.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| SimError::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        body(&mut w).map_err(|e| SimError::io(path, e))?;
        w.flush().map_err(|e| SimError::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| SimError::io(path, e.error))?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| SimError::io(path, e))?))
}

/// Maps a read error to a format error: short reads mean a truncated file.
fn read_err(path: &Path) -> impl Fn(io::Error) -> SimError + '_ {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            SimError::format(path, "unexpected end of file")
        } else {
            SimError::io(path, e)
        }
    }
}

fn check_magic(r: &mut impl Read, magic: &[u8; 8], path: &Path) -> Result<()> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(read_err(path))?;
    if &buf != magic {
        return Err(SimError::format(path, "wrong file type"));
    }
    let version = r.read_u32::<LE>().map_err(read_err(path))?;
    if version != FORMAT_VERSION {
        return Err(SimError::format(path, format!("unsupported version {version}")));
    }
    Ok(())
}

fn check_end(r: &mut impl Read, path: &Path) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe).map_err(|e| SimError::io(path, e))? {
        0 => Ok(()),
        _ => Err(SimError::format(path, "trailing bytes")),
    }
}

fn write_complex(w: &mut dyn Write, m: &CMatrix) -> io::Result<()> {
    for z in m.iter() {
        w.write_f64::<LE>(z.re)?;
        w.write_f64::<LE>(z.im)?;
    }
    Ok(())
}

fn read_complex(r: &mut impl Read, rows: usize, cols: usize, path: &Path) -> Result<CMatrix> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let re = r.read_f64::<LE>().map_err(read_err(path))?;
        let im = r.read_f64::<LE>().map_err(read_err(path))?;
        data.push(C64::new(re, im));
    }
    CMatrix::from_shape_vec((rows, cols), data).map_err(|e| SimError::format(path, e.to_string()))
}

fn write_shaped(w: &mut dyn Write, m: &CMatrix) -> io::Result<()> {
    w.write_u32::<LE>(m.nrows() as u32)?;
    w.write_u32::<LE>(m.ncols() as u32)?;
    write_complex(w, m)
}

fn read_shaped(r: &mut impl Read, path: &Path) -> Result<CMatrix> {
    let rows = r.read_u32::<LE>().map_err(read_err(path))? as usize;
    let cols = r.read_u32::<LE>().map_err(read_err(path))? as usize;
    read_complex(r, rows, cols, path)
}

/// Header of a received-pilots container.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PilotsHeader {
    pub antennas: u32,
    pub elements: u32,
    pub users: u32,
    pub subframes: u32,
    pub count: u64,
    pub seed: u64,
    pub config_hash: u64,
    pub noise_variance: f64,
}

/// `header`, then `count * users` observation matrices of `antennas x subframes`.
pub fn save_pilots(path: &Path, header: &PilotsHeader, batches: &[ReceivedPilots]) -> Result<()> {
    let shape = (header.antennas as usize, header.subframes as usize);
    if batches.len() as u64 != header.count
        || batches
            .iter()
            .any(|b| b.per_user.len() != header.users as usize || b.per_user.iter().any(|y| y.dim() != shape))
    {
        return Err(SimError::config("received pilots do not match the container header"));
    }
    write_atomic(path, |w| {
        w.write_all(PILOTS_MAGIC)?;
        w.write_u32::<LE>(FORMAT_VERSION)?;
        for x in [header.antennas, header.elements, header.users, header.subframes] {
            w.write_u32::<LE>(x)?;
        }
        w.write_u64::<LE>(header.count)?;
        w.write_u64::<LE>(header.seed)?;
        w.write_u64::<LE>(header.config_hash)?;
        w.write_f64::<LE>(header.noise_variance)?;
        for b in batches {
            for y in &b.per_user {
                write_complex(w, y)?;
            }
        }
        Ok(())
    })
}

pub fn load_pilots(path: &Path) -> Result<(PilotsHeader, Vec<ReceivedPilots>)> {
    let mut r = open(path)?;
    check_magic(&mut r, PILOTS_MAGIC, path)?;
    let mut dims = [0u32; 4];
    for d in &mut dims {
        *d = r.read_u32::<LE>().map_err(read_err(path))?;
    }
    let header = PilotsHeader {
        antennas: dims[0],
        elements: dims[1],
        users: dims[2],
        subframes: dims[3],
        count: r.read_u64::<LE>().map_err(read_err(path))?,
        seed: r.read_u64::<LE>().map_err(read_err(path))?,
        config_hash: r.read_u64::<LE>().map_err(read_err(path))?,
        noise_variance: r.read_f64::<LE>().map_err(read_err(path))?,
    };
    let mut out = Vec::new();
    for _ in 0..header.count {
        let per_user = (0..header.users)
            .map(|_| read_complex(&mut r, header.antennas as usize, header.subframes as usize, path))
            .collect::<Result<Vec<_>>>()?;
        out.push(ReceivedPilots {
            per_user,
            effective_noise_variance: header.noise_variance,
        });
    }
    check_end(&mut r, path)?;
    Ok((header, out))
}

/// Per-user LMMSE moments keyed by the statistics fingerprint.
pub fn save_statistics(path: &Path, stats: &[ChannelStatistics]) -> Result<()> {
    let fingerprint = stats.first().map(|s| s.fingerprint).unwrap_or(0);
    if stats.iter().any(|s| s.fingerprint != fingerprint) {
        return Err(SimError::config(
            "statistics of one cache file must share a fingerprint",
        ));
    }
    write_atomic(path, |w| {
        w.write_all(STATS_MAGIC)?;
        w.write_u32::<LE>(FORMAT_VERSION)?;
        w.write_u64::<LE>(fingerprint)?;
        w.write_u32::<LE>(stats.len() as u32)?;
        for s in stats {
            w.write_u64::<LE>(s.sample_count as u64)?;
            write_shaped(w, &s.mean_observation)?;
            write_shaped(w, &s.observation_covariance)?;
            write_shaped(w, &s.cross_covariance)?;
            write_shaped(w, &s.mean_channel)?;
        }
        Ok(())
    })
}

/// Load a statistics cache; a fingerprint other than `expected` is a
/// configuration error.
pub fn load_statistics(path: &Path, expected: u64) -> Result<Vec<ChannelStatistics>> {
    let mut r = open(path)?;
    check_magic(&mut r, STATS_MAGIC, path)?;
    let fingerprint = r.read_u64::<LE>().map_err(read_err(path))?;
    if fingerprint != expected {
        return Err(SimError::config(format!(
            "{}: statistics belong to configuration {fingerprint:016x}, expected {expected:016x}",
            path.display()
        )));
    }
    let users = r.read_u32::<LE>().map_err(read_err(path))?;
    let mut out = Vec::with_capacity(users as usize);
    for _ in 0..users {
        let sample_count = r.read_u64::<LE>().map_err(read_err(path))? as usize;
        out.push(ChannelStatistics {
            sample_count,
            mean_observation: read_shaped(&mut r, path)?,
            observation_covariance: read_shaped(&mut r, path)?,
            cross_covariance: read_shaped(&mut r, path)?,
            mean_channel: read_shaped(&mut r, path)?,
            fingerprint,
        });
    }
    check_end(&mut r, path)?;
    Ok(out)
}

/// A checkpoint together with the spec and pilot plan it was trained under.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub checkpoint: Checkpoint,
    pub spec: ExperimentSpec,
    pub plan: PilotPlan,
}

#[derive(Serialize, Deserialize)]
struct BlockMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    depth: usize,
    embed_hidden: usize,
    width: usize,
    layer_hidden: usize,
    input_mode: String,
    antennas: usize,
    elements: usize,
    subframes: usize,
    initial_lr: f64,
    lr_decay_factor: f64,
    lr_decay_every: u64,
    iterations_per_epoch: usize,
    batch_size: usize,
    early_stop_patience: usize,
    validation_size: usize,
    max_epochs: usize,
    seed: u64,
    utility: String,
    system_fingerprint: String,
    plan_fingerprint: String,
    pipeline_fingerprint: String,
    pilot_scale: f64,
    location_scale: f64,
    output_scale: f64,
    validation: f64,
    epoch: usize,
    blocks: Vec<BlockMeta>,
    spec: ExperimentSpec,
}

fn hex(x: u64) -> String {
    format!("{x:016x}")
}

fn unhex(s: &str, path: &Path) -> Result<u64> {
    u64::from_str_radix(s, 16).map_err(|_| SimError::format(path, format!("bad fingerprint '{s}'")))
}

/// Magic, version, `u64` metadata length, JSON metadata, then the parameter
/// values and the IRS training matrix as raw `f64`.
pub fn save_checkpoint(path: &Path, model: &SavedModel) -> Result<()> {
    let ck = &model.checkpoint;
    let t = &ck.training;
    let meta = CheckpointMeta {
        kind: ck.kind.name().to_string(),
        depth: ck.gnn.depth,
        embed_hidden: ck.gnn.embed_hidden,
        width: ck.gnn.width,
        layer_hidden: ck.gnn.layer_hidden,
        input_mode: ck.gnn.input_mode.name().to_string(),
        antennas: ck.dims.antennas,
        elements: ck.dims.elements,
        subframes: ck.dims.subframes,
        initial_lr: t.initial_lr,
        lr_decay_factor: t.lr_decay_factor,
        lr_decay_every: t.lr_decay_every,
        iterations_per_epoch: t.iterations_per_epoch,
        batch_size: t.batch_size,
        early_stop_patience: t.early_stop_patience,
        validation_size: t.validation_size,
        max_epochs: t.max_epochs,
        seed: t.seed,
        utility: t.utility.name().to_string(),
        system_fingerprint: hex(ck.system_fingerprint),
        plan_fingerprint: hex(ck.plan_fingerprint),
        pipeline_fingerprint: hex(ck.pipeline_fingerprint),
        pilot_scale: ck.scaling.pilot,
        location_scale: ck.scaling.location,
        output_scale: ck.output_scale,
        validation: ck.validation,
        epoch: ck.epoch,
        blocks: ck
            .params
            .layout
            .blocks()
            .iter()
            .map(|b| BlockMeta {
                name: b.name.clone(),
                rows: b.rows,
                cols: b.cols,
            })
            .collect(),
        spec: model.spec.clone(),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let q = &model.plan.irs_training;
    write_atomic(path, |w| {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LE>(FORMAT_VERSION)?;
        w.write_u64::<LE>(json.len() as u64)?;
        w.write_all(&json)?;
        w.write_u64::<LE>(ck.params.values.len() as u64)?;
        for x in &ck.params.values {
            w.write_f64::<LE>(*x)?;
        }
        write_shaped(w, q)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<SavedModel> {
    let mut r = open(path)?;
    check_magic(&mut r, CHECKPOINT_MAGIC, path)?;
    let len = r.read_u64::<LE>().map_err(read_err(path))?;
    if len > 1 << 30 {
        return Err(SimError::format(path, "metadata too large"));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(read_err(path))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&json).map_err(|e| SimError::format(path, format!("metadata: {e}")))?;
    let count = r.read_u64::<LE>().map_err(read_err(path))?;
    let mut values = Vec::with_capacity(count.min(1 << 28) as usize);
    for _ in 0..count {
        values.push(r.read_f64::<LE>().map_err(read_err(path))?);
    }
    let q = read_shaped(&mut r, path)?;
    check_end(&mut r, path)?;

    let bad = |reason: String| SimError::format(path, reason);
    let kind = match meta.kind.as_str() {
        "policy" => ModelKind::Policy,
        "estimator" => ModelKind::Estimator,
        other => return Err(bad(format!("unknown model kind '{other}'"))),
    };
    let input_mode: InputMode = meta
        .input_mode
        .parse()
        .map_err(|e: irs_core::Error| bad(e.to_string()))?;
    let gnn = GnnConfig {
        depth: meta.depth,
        embed_hidden: meta.embed_hidden,
        width: meta.width,
        layer_hidden: meta.layer_hidden,
        input_mode,
    };
    let dims = Dimensions {
        antennas: meta.antennas,
        elements: meta.elements,
        subframes: meta.subframes,
    };
    let layout = match kind {
        ModelKind::Policy => Gnn::new(gnn, dims)?.layout().clone(),
        ModelKind::Estimator => EstimationNet::new(gnn, dims)?.layout().clone(),
    };
    let same_blocks = layout.blocks().len() == meta.blocks.len()
        && layout
            .blocks()
            .iter()
            .zip(&meta.blocks)
            .all(|(a, b)| a.name == b.name && a.rows == b.rows && a.cols == b.cols);
    if !same_blocks {
        return Err(bad("parameter blocks do not match the network layout".into()));
    }
    let params = GnnParameters::from_values(layout, values).map_err(|e| bad(e.to_string()))?;
    let training = TrainingConfig {
        initial_lr: meta.initial_lr,
        lr_decay_factor: meta.lr_decay_factor,
        lr_decay_every: meta.lr_decay_every,
        iterations_per_epoch: meta.iterations_per_epoch,
        batch_size: meta.batch_size,
        early_stop_patience: meta.early_stop_patience,
        validation_size: meta.validation_size,
        max_epochs: meta.max_epochs,
        seed: meta.seed,
        utility: meta.utility.parse().map_err(|e: irs_core::Error| bad(e.to_string()))?,
    };
    let spec = meta.spec;
    let system = spec.system_config()?;
    let plan = PilotPlan::from_parts(
        make_pilot_matrix(system.num_users, system.uplink_power),
        q,
        system.uplink_power,
    )?;
    let checkpoint = Checkpoint {
        kind,
        gnn,
        dims,
        training,
        system_fingerprint: unhex(&meta.system_fingerprint, path)?,
        plan_fingerprint: unhex(&meta.plan_fingerprint, path)?,
        pipeline_fingerprint: unhex(&meta.pipeline_fingerprint, path)?,
        scaling: FeatureScaling {
            pilot: meta.pilot_scale,
            location: meta.location_scale,
        },
        output_scale: meta.output_scale,
        params,
        validation: meta.validation,
        epoch: meta.epoch,
    };
    if plan.fingerprint() != checkpoint.plan_fingerprint {
        return Err(bad("stored pilot plan does not match its fingerprint".into()));
    }
    Ok(SavedModel { checkpoint, spec, plan })
}
