//! LAMMPS dump parsing, energy joins, energy normalization and dataset assembly.
//!
//! A dump file carries only integer atom types; a [`SpeciesMap`] supplies the
//! element labels. Frames are keyed by their `TIMESTEP`, which is also the key
//! of the energy table.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap_coordinate;
use crate::scalar::Scalar;

/// One simulation snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AtomicConfiguration<S: Scalar> {
    /// Cartesian positions in Å, wrapped into `[0, L)`.
    pub positions: Vec<[S; 3]>,
    pub species: Vec<String>,
    /// Orthorhombic box edge lengths in Å.
    #[serde(rename = "box")]
    pub box_lengths: [S; 3],
    /// Total potential energy in eV; unset until joined with an energy table.
    pub energy: Option<S>,
    /// Temperature in K (metadata; used for stratified splits).
    pub temperature_tag: S,
    pub frame_id: u64,
}

impl<S: Scalar> AtomicConfiguration<S> {
    pub fn n_atoms(&self) -> usize {
        self.positions.len()
    }

    /// Wraps every coordinate into `[0, L)` for its axis.
    pub fn wrap(&mut self) {
        for p in &mut self.positions {
            for (c, &l) in p.iter_mut().zip(&self.box_lengths) {
                *c = wrap_coordinate(*c, l);
            }
        }
    }

    /// Checks the structural invariants against a declared species set.
    pub fn validate(&self, species_set: &[String]) -> Result<()> {
        let n = self.positions.len();
        if n < 2 {
            return Err(Error::Structure(format!(
                "frame {} has {n} atoms, need at least 2",
                self.frame_id
            )));
        }
        if self.species.len() != n {
            return Err(Error::Structure(format!(
                "frame {}: {} species labels for {n} atoms",
                self.frame_id,
                self.species.len()
            )));
        }
        if self
            .box_lengths
            .iter()
            .any(|&l| !(l > S::zero()) || !l.is_finite())
        {
            return Err(Error::Structure(format!(
                "frame {}: box edges must be positive, got {:?}",
                self.frame_id, self.box_lengths
            )));
        }
        for (i, p) in self.positions.iter().enumerate() {
            for (c, &l) in p.iter().zip(&self.box_lengths) {
                if !c.is_finite() {
                    return Err(Error::Structure(format!(
                        "frame {}: atom {i} has a non-finite coordinate",
                        self.frame_id
                    )));
                }
                if *c < S::zero() || *c >= l {
                    return Err(Error::Structure(format!(
                        "frame {}: atom {i} coordinate {c} outside [0, {l})",
                        self.frame_id
                    )));
                }
            }
        }
        if let Some(bad) = self.species.iter().find(|s| !species_set.contains(s)) {
            return Err(Error::Structure(format!(
                "frame {}: species {bad:?} not in {species_set:?}",
                self.frame_id
            )));
        }
        if let Some(e) = self.energy {
            if !e.is_finite() {
                return Err(Error::Structure(format!(
                    "frame {}: non-finite energy",
                    self.frame_id
                )));
            }
        }
        Ok(())
    }
}

/// LAMMPS integer atom type → element label. Label order by type id defines the
/// one-hot column order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeciesMap {
    types: BTreeMap<u32, String>,
}

impl SpeciesMap {
    pub fn new(types: BTreeMap<u32, String>) -> Result<Self> {
        if types.is_empty() {
            return Err(Error::arg("species map is empty"));
        }
        let mut seen = Vec::new();
        for label in types.values() {
            if seen.contains(&label) {
                return Err(Error::arg(format!("species label {label:?} mapped twice")));
            }
            seen.push(label);
        }
        Ok(Self { types })
    }

    /// Parses `type=label` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut types = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected `type=label`, got {line:?}"),
            })?;
            let k: u32 = k.trim().parse().map_err(|_| Error::Parse {
                line: n + 1,
                message: format!("atom type {:?} is not an integer", k.trim()),
            })?;
            let v = v.trim();
            if v.is_empty() {
                return Err(Error::Parse {
                    line: n + 1,
                    message: "empty species label".into(),
                });
            }
            types.insert(k, v.to_string());
        }
        Self::new(types)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn label(&self, type_id: u32) -> Option<&str> {
        self.types.get(&type_id).map(String::as_str)
    }

    pub fn type_of(&self, label: &str) -> Option<u32> {
        self.types
            .iter()
            .find(|(_, l)| *l == label)
            .map(|(&k, _)| k)
    }

    /// Labels in type-id order.
    pub fn species(&self) -> Vec<String> {
        self.types.values().cloned().collect()
    }
}

struct LineReader<R> {
    inner: R,
    line_no: usize,
    buf: String,
}

impl<R: BufRead> LineReader<R> {
    fn next_line(&mut self) -> Result<Option<&str>> {
        self.buf.clear();
        if self.inner.read_line(&mut self.buf)? == 0 {
            return Ok(None);
        }
        self.line_no += 1;
        Ok(Some(self.buf.trim_end_matches(['\n', '\r'])))
    }

    fn parse_err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line_no,
            message: message.into(),
        }
    }

    fn expect_item(&mut self, item: &str) -> Result<String> {
        match self.next_line()? {
            Some(l) if l.trim_start().starts_with(item) => Ok(l.trim().to_string()),
            Some(l) => {
                let l = l.to_string();
                Err(self.parse_err(format!("expected `{item}`, got {l:?}")))
            }
            None => Err(Error::Structure(format!(
                "stream ended at line {} while expecting `{item}`",
                self.line_no
            ))),
        }
    }

    fn value_line(&mut self, what: &str) -> Result<String> {
        match self.next_line()? {
            Some(l) if !l.trim_start().starts_with("ITEM:") => Ok(l.trim().to_string()),
            Some(_) => Err(Error::Structure(format!(
                "line {}: `ITEM:` header where {what} was expected",
                self.line_no
            ))),
            None => Err(Error::Structure(format!(
                "stream ended at line {} while reading {what}",
                self.line_no
            ))),
        }
    }
}

fn parse_num<S: Scalar>(tok: &str, line: usize) -> Result<S> {
    tok.parse::<S>().map_err(|_| Error::Parse {
        line,
        message: format!("{tok:?} is not a number"),
    })
}

#[derive(Clone, Copy)]
enum CoordKind {
    Cartesian,
    Scaled,
}

/// Parses every frame of a LAMMPS text dump with an orthorhombic box.
///
/// Atoms are ordered by id, coordinates are taken relative to the box lower
/// bounds and wrapped into `[0, L)`. `ATOMS` must list `id`, `type` and one of
/// `x y z`, `xu yu zu` or `xs ys zs` (scaled). Energies stay unset.
pub fn parse_dump<S: Scalar, R: Read>(
    input: R,
    species: &SpeciesMap,
    temperature_tag: S,
) -> Result<Vec<AtomicConfiguration<S>>> {
    let mut r = LineReader {
        inner: BufReader::new(input),
        line_no: 0,
        buf: String::new(),
    };
    let mut frames = Vec::new();
    loop {
        // skip blank lines between frames
        let header = loop {
            match r.next_line()? {
                None => return Ok(frames),
                Some(l) if l.trim().is_empty() => continue,
                Some(l) => break l.trim().to_string(),
            }
        };
        if !header.starts_with("ITEM: TIMESTEP") {
            return Err(r.parse_err(format!("expected `ITEM: TIMESTEP`, got {header:?}")));
        }
        let ts = r.value_line("timestep")?;
        let frame_id: u64 = ts
            .parse()
            .map_err(|_| r.parse_err(format!("timestep {ts:?} is not a non-negative integer")))?;

        r.expect_item("ITEM: NUMBER OF ATOMS")?;
        let n_line = r.value_line("atom count")?;
        let n_atoms: usize = n_line
            .parse()
            .map_err(|_| r.parse_err(format!("atom count {n_line:?} is not an integer")))?;

        let bounds_header = r.expect_item("ITEM: BOX BOUNDS")?;
        if ["xy", "xz", "yz"]
            .iter()
            .any(|t| bounds_header.split_whitespace().any(|w| w == *t))
        {
            return Err(Error::UnsupportedFormat(format!(
                "line {}: triclinic box ({bounds_header}) is not supported",
                r.line_no
            )));
        }
        let mut lo = [S::zero(); 3];
        let mut box_lengths = [S::zero(); 3];
        for axis in 0..3 {
            let l = r.value_line("box bounds")?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() != 2 {
                if toks.len() == 3 {
                    return Err(Error::UnsupportedFormat(format!(
                        "line {}: tilt factor present, only orthorhombic boxes are supported",
                        r.line_no
                    )));
                }
                return Err(r.parse_err(format!("expected `lo hi`, got {l:?}")));
            }
            let a: S = parse_num(toks[0], r.line_no)?;
            let b: S = parse_num(toks[1], r.line_no)?;
            if !(b > a) {
                return Err(Error::Structure(format!(
                    "line {}: box bounds hi {b} must exceed lo {a}",
                    r.line_no
                )));
            }
            lo[axis] = a;
            box_lengths[axis] = b - a;
        }

        let atoms_header = r.expect_item("ITEM: ATOMS")?;
        let cols: Vec<&str> = atoms_header["ITEM: ATOMS".len()..]
            .split_whitespace()
            .collect();
        let find = |name: &str| cols.iter().position(|c| *c == name);
        let (id_col, type_col) = match (find("id"), find("type")) {
            (Some(i), Some(t)) => (i, t),
            _ => return Err(r.parse_err("`ITEM: ATOMS` must list `id` and `type` columns")),
        };
        let (xyz, kind) = if let (Some(x), Some(y), Some(z)) = (find("x"), find("y"), find("z")) {
            ([x, y, z], CoordKind::Cartesian)
        } else if let (Some(x), Some(y), Some(z)) = (find("xu"), find("yu"), find("zu")) {
            ([x, y, z], CoordKind::Cartesian)
        } else if let (Some(x), Some(y), Some(z)) = (find("xs"), find("ys"), find("zs")) {
            ([x, y, z], CoordKind::Scaled)
        } else {
            return Err(r.parse_err("`ITEM: ATOMS` has no coordinate columns"));
        };
        let needed = cols.len();

        let mut atoms: Vec<(u64, String, [S; 3])> = Vec::with_capacity(n_atoms);
        for k in 0..n_atoms {
            let l = r
                .value_line(&format!("atom {} of {n_atoms}", k + 1))
                .map_err(|e| match e {
                    Error::Structure(m) => Error::Structure(format!("atom count mismatch: {m}")),
                    other => other,
                })?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() < needed {
                return Err(r.parse_err(format!("expected {needed} columns, got {}", toks.len())));
            }
            let id: u64 = toks[id_col].parse().map_err(|_| {
                r.parse_err(format!("atom id {:?} is not an integer", toks[id_col]))
            })?;
            let type_id: u32 = toks[type_col].parse().map_err(|_| {
                r.parse_err(format!("atom type {:?} is not an integer", toks[type_col]))
            })?;
            let label = species.label(type_id).ok_or_else(|| {
                Error::Structure(format!(
                    "line {}: atom type {type_id} missing from species map",
                    r.line_no
                ))
            })?;
            let mut p = [S::zero(); 3];
            for axis in 0..3 {
                let v: S = parse_num(toks[xyz[axis]], r.line_no)?;
                if !v.is_finite() {
                    return Err(r.parse_err("non-finite coordinate"));
                }
                let cart = match kind {
                    CoordKind::Cartesian => v - lo[axis],
                    CoordKind::Scaled => v * box_lengths[axis],
                };
                p[axis] = wrap_coordinate(cart, box_lengths[axis]);
            }
            atoms.push((id, label.to_string(), p));
        }
        atoms.sort_by_key(|a| a.0);
        if atoms.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Structure(format!(
                "frame {frame_id}: duplicate atom ids"
            )));
        }
        if n_atoms < 2 {
            return Err(Error::Structure(format!(
                "frame {frame_id}: {n_atoms} atoms, need at least 2"
            )));
        }
        let (positions, labels) = atoms.into_iter().map(|(_, s, p)| (p, s)).unzip();
        frames.push(AtomicConfiguration {
            positions,
            species: labels,
            box_lengths,
            energy: None,
            temperature_tag,
            frame_id,
        });
    }
}

/// Writes configurations as a LAMMPS text dump (box from 0 to L, ids 1..N).
pub fn write_dump<S: Scalar>(
    configs: &[AtomicConfiguration<S>],
    species: &SpeciesMap,
) -> Result<String> {
    let mut out = String::new();
    for c in configs {
        let _ = writeln!(out, "ITEM: TIMESTEP\n{}", c.frame_id);
        let _ = writeln!(out, "ITEM: NUMBER OF ATOMS\n{}", c.n_atoms());
        let _ = writeln!(out, "ITEM: BOX BOUNDS pp pp pp");
        for l in c.box_lengths {
            let _ = writeln!(out, "0 {l}");
        }
        let _ = writeln!(out, "ITEM: ATOMS id type x y z");
        for (i, (p, s)) in c.positions.iter().zip(&c.species).enumerate() {
            let t = species
                .type_of(s)
                .ok_or_else(|| Error::Structure(format!("species {s:?} not in species map")))?;
            let _ = writeln!(out, "{} {t} {} {} {}", i + 1, p[0], p[1], p[2]);
        }
    }
    Ok(out)
}

/// Reads a two-column `frame_id,energy_eV` CSV. A non-numeric first row is
/// taken as a header; `#` lines are comments.
pub fn read_energy_table<S: Scalar, R: Read>(input: R) -> Result<BTreeMap<u64, S>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input);
    let mut table = BTreeMap::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(n + 1, |p| p.line() as usize);
        if rec.len() != 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected 2 columns, got {}", rec.len()),
            });
        }
        let id = rec[0].parse::<u64>();
        if n == 0 && id.is_err() {
            continue;
        }
        let id = id.map_err(|_| Error::Parse {
            line,
            message: format!("frame id {:?} is not an integer", &rec[0]),
        })?;
        let e: S = parse_num(&rec[1], line)?;
        if table.insert(id, e).is_some() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate frame id {id}"),
            });
        }
    }
    Ok(table)
}

/// Fills each configuration's energy by frame id.
pub fn join_energies<S: Scalar>(
    mut configs: Vec<AtomicConfiguration<S>>,
    table: &BTreeMap<u64, S>,
) -> Result<Vec<AtomicConfiguration<S>>> {
    let missing: Vec<u64> = configs
        .iter()
        .filter(|c| !table.contains_key(&c.frame_id))
        .map(|c| c.frame_id)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFrame(missing));
    }
    for c in &mut configs {
        c.energy = Some(table[&c.frame_id]);
    }
    Ok(configs)
}

/// Linear map of energies onto `[lo, hi] = [0, 100]`, fitted on training data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EnergyNormalizer<S: Scalar> {
    pub e_min: S,
    pub e_max: S,
    pub lo: S,
    pub hi: S,
}

impl<S: Scalar> EnergyNormalizer<S> {
    pub fn fit(train_energies: &[S]) -> Result<Self> {
        if train_energies.is_empty() {
            return Err(Error::arg(
                "cannot fit an energy normalizer on zero energies",
            ));
        }
        if train_energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::arg("non-finite energy in normalizer fit"));
        }
        let e_min = train_energies.iter().copied().fold(S::infinity(), S::min);
        let e_max = train_energies
            .iter()
            .copied()
            .fold(S::neg_infinity(), S::max);
        Ok(Self {
            e_min,
            e_max,
            lo: S::zero(),
            hi: S::lit(100.0),
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.e_max == self.e_min
    }

    /// eV → normalized units. A degenerate range maps everything to `lo`.
    pub fn normalize(&self, e: S) -> S {
        if self.is_degenerate() {
            return self.lo;
        }
        self.lo + (e - self.e_min) / (self.e_max - self.e_min) * (self.hi - self.lo)
    }

    pub fn denormalize(&self, v: S) -> S {
        if self.is_degenerate() {
            return self.e_min;
        }
        self.e_min + (v - self.lo) / (self.hi - self.lo) * (self.e_max - self.e_min)
    }

    /// Normalized units per eV (zero when degenerate).
    pub fn scale(&self) -> S {
        if self.is_degenerate() {
            S::zero()
        } else {
            (self.hi - self.lo) / (self.e_max - self.e_min)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

fn temperature_key<S: Scalar>(t: S) -> u64 {
    t.as_f64().to_bits()
}

/// Randomly keeps at most `max_per_temperature` frames per temperature tag,
/// preserving the original order of survivors.
pub fn subsample_per_temperature<S: Scalar>(
    configs: Vec<AtomicConfiguration<S>>,
    max_per_temperature: usize,
    seed: u64,
) -> Vec<AtomicConfiguration<S>> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, c) in configs.iter().enumerate() {
        groups
            .entry(temperature_key(c.temperature_tag))
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; configs.len()];
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(max_per_temperature) {
            keep[i] = true;
        }
    }
    configs
        .into_iter()
        .zip(keep)
        .filter_map(|(c, k)| k.then_some(c))
        .collect()
}

/// Configurations with a fitted normalizer and a train/test assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S: Scalar> {
    pub configs: Vec<AtomicConfiguration<S>>,
    pub energy_norm: EnergyNormalizer<S>,
    pub split: Vec<Split>,
    /// One-hot column order.
    pub species: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct DatasetMeta<S: Scalar> {
    format: String,
    species: Vec<String>,
    energy_norm: EnergyNormalizer<S>,
    split: Vec<Split>,
}

const DATASET_FORMAT: &str = "glassvae-dataset-v1";

/// Stratified split: within every temperature tag, `round(ratio * n)` frames go
/// to train. Deterministic for a fixed seed. The normalizer is fit on train only.
pub fn split_dataset<S: Scalar>(
    configs: Vec<AtomicConfiguration<S>>,
    species: Vec<String>,
    ratio: f64,
    seed: u64,
) -> Result<Dataset<S>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::arg(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    if configs.len() < 2 {
        return Err(Error::arg(format!(
            "need at least 2 configurations to split, got {}",
            configs.len()
        )));
    }
    for c in &configs {
        c.validate(&species)?;
        if c.energy.is_none() {
            return Err(Error::arg(format!("frame {} has no energy", c.frame_id)));
        }
    }
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, c) in configs.iter().enumerate() {
        groups
            .entry(temperature_key(c.temperature_tag))
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = vec![Split::Test; configs.len()];
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        let n_train = ((ratio * idx.len() as f64).round() as usize).min(idx.len());
        for &i in idx.iter().take(n_train) {
            split[i] = Split::Train;
        }
    }
    let train_e: Vec<S> = configs
        .iter()
        .zip(&split)
        .filter(|(_, s)| **s == Split::Train)
        .filter_map(|(c, _)| c.energy)
        .collect();
    if train_e.is_empty() {
        return Err(Error::arg("split left no training configurations"));
    }
    let energy_norm = EnergyNormalizer::fit(&train_e)?;
    Ok(Dataset {
        configs,
        energy_norm,
        split,
        species,
    })
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn part(&self, which: Split) -> Vec<&AtomicConfiguration<S>> {
        self.configs
            .iter()
            .zip(&self.split)
            .filter(|(_, s)| **s == which)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn train(&self) -> Vec<&AtomicConfiguration<S>> {
        self.part(Split::Train)
    }

    pub fn test(&self) -> Vec<&AtomicConfiguration<S>> {
        self.part(Split::Test)
    }

    /// `(temperature, train count, test count)` per tag, ascending temperature.
    pub fn summary(&self) -> Vec<(S, usize, usize)> {
        let mut per: BTreeMap<u64, (S, usize, usize)> = BTreeMap::new();
        for (c, s) in self.configs.iter().zip(&self.split) {
            let e =
                per.entry(temperature_key(c.temperature_tag))
                    .or_insert((c.temperature_tag, 0, 0));
            match s {
                Split::Train => e.1 += 1,
                Split::Test => e.2 += 1,
            }
        }
        let mut v: Vec<_> = per.into_values().collect();
        v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        v
    }

    /// Sibling metadata path: `data.jsonl` → `data.meta.json`.
    pub fn meta_path(jsonl: &Path) -> PathBuf {
        jsonl.with_extension("meta.json")
    }

    /// Writes the configurations as JSON lines plus the sibling metadata file.
    pub fn write(&self, jsonl: &Path) -> Result<()> {
        write_jsonl(jsonl, &self.configs)?;
        let meta = DatasetMeta {
            format: DATASET_FORMAT.to_string(),
            species: self.species.clone(),
            energy_norm: self.energy_norm,
            split: self.split.clone(),
        };
        let f = BufWriter::new(File::create(Self::meta_path(jsonl))?);
        serde_json::to_writer_pretty(f, &meta)?;
        Ok(())
    }

    pub fn read(jsonl: &Path) -> Result<Self> {
        let configs = read_jsonl(File::open(jsonl)?)?;
        let meta: DatasetMeta<S> =
            serde_json::from_reader(BufReader::new(File::open(Self::meta_path(jsonl))?))?;
        if meta.format != DATASET_FORMAT {
            return Err(Error::UnsupportedFormat(format!(
                "dataset format {:?}",
                meta.format
            )));
        }
        if meta.split.len() != configs.len() {
            return Err(Error::Structure(format!(
                "metadata lists {} split entries for {} configurations",
                meta.split.len(),
                configs.len()
            )));
        }
        for c in &configs {
            c.validate(&meta.species)?;
        }
        Ok(Self {
            configs,
            energy_norm: meta.energy_norm,
            split: meta.split,
            species: meta.species,
        })
    }
}

pub fn write_jsonl<S: Scalar>(path: &Path, configs: &[AtomicConfiguration<S>]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for c in configs {
        serde_json::to_writer(&mut f, c)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<S: Scalar, R: Read>(input: R) -> Result<Vec<AtomicConfiguration<S>>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(c);
    }
    Ok(out)
}

/// Distinct temperature tags with frame counts.
pub fn frames_per_temperature<S: Scalar>(
    configs: &[AtomicConfiguration<S>],
) -> HashMap<u64, usize> {
    let mut m = HashMap::new();
    for c in configs {
        *m.entry(temperature_key(c.temperature_tag)).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cuzr() -> SpeciesMap {
        SpeciesMap::parse("# CuZr\n1=Cu\n2 = Zr\n").unwrap()
    }

    const THREE_ATOMS: &str = "ITEM: TIMESTEP
5
ITEM: NUMBER OF ATOMS
3
ITEM: BOX BOUNDS pp pp pp
0.0 10.0
0.0 10.0
0.0 10.0
ITEM: ATOMS id type x y z
2 2 4.5 5.0 5.5
1 1 0.5 1.0 1.5
3 1 9.0 8.0 7.0
";

    fn frame(id: u64, temp: f64, e: Option<f64>) -> AtomicConfiguration<f64> {
        AtomicConfiguration {
            positions: vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
            species: vec!["Cu".into(), "Zr".into()],
            box_lengths: [5.0; 3],
            energy: e,
            temperature_tag: temp,
            frame_id: id,
        }
    }

    #[test]
    fn species_map_order_and_errors() {
        let m = cuzr();
        assert_eq!(m.species(), vec!["Cu", "Zr"]);
        assert_eq!(m.label(2), Some("Zr"));
        assert!(SpeciesMap::parse("1=Cu\n2=Cu").is_err());
        assert!(matches!(
            SpeciesMap::parse("1 Cu"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(SpeciesMap::parse("").is_err());
    }

    #[test]
    fn empty_stream_gives_no_frames() {
        let v: Vec<AtomicConfiguration<f64>> = parse_dump("".as_bytes(), &cuzr(), 0.0).unwrap();
        assert!(v.is_empty());
    }

    #[test]
    fn hand_written_three_atom_frame() {
        let v: Vec<AtomicConfiguration<f64>> =
            parse_dump(THREE_ATOMS.as_bytes(), &cuzr(), 700.0).unwrap();
        assert_eq!(v.len(), 1);
        let c = &v[0];
        assert_eq!(c.frame_id, 5);
        assert_eq!(c.box_lengths, [10.0, 10.0, 10.0]);
        assert_eq!(
            c.positions,
            vec![[0.5, 1.0, 1.5], [4.5, 5.0, 5.5], [9.0, 8.0, 7.0]]
        );
        assert_eq!(c.species, vec!["Cu", "Zr", "Cu"]);
        assert_eq!(c.energy, None);
        assert_eq!(c.temperature_tag, 700.0);
    }

    #[test]
    fn coordinates_are_wrapped_relative_to_lower_bound() {
        let text = THREE_ATOMS
            .replace("0.0 10.0", "-5.0 5.0")
            .replace("9.0 8.0 7.0", "5.5 -6.0 0.0");
        let v: Vec<AtomicConfiguration<f64>> = parse_dump(text.as_bytes(), &cuzr(), 0.0).unwrap();
        assert_eq!(v[0].positions[0], [5.5, 6.0, 6.5]);
        assert_eq!(v[0].positions[2], [0.5, 9.0, 5.0]);
    }

    #[test]
    fn malformed_header_names_line() {
        let text = THREE_ATOMS.replace("ITEM: NUMBER OF ATOMS", "ITEM: NATOMS");
        let err = parse_dump::<f64, _>(text.as_bytes(), &cuzr(), 0.0).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn atom_count_mismatch_is_structural() {
        let text = THREE_ATOMS.replace("ATOMS\n3", "ATOMS\n4");
        let err = parse_dump::<f64, _>(text.as_bytes(), &cuzr(), 0.0).unwrap_err();
        assert!(matches!(err, Error::Structure(_)), "{err}");
    }

    #[test]
    fn triclinic_box_is_unsupported() {
        let text = THREE_ATOMS
            .replace("BOX BOUNDS pp pp pp", "BOX BOUNDS xy xz yz pp pp pp")
            .replace("0.0 10.0\n", "0.0 10.0 0.0\n");
        let err = parse_dump::<f64, _>(text.as_bytes(), &cuzr(), 0.0).unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(_)), "{err}");
        let text = THREE_ATOMS.replacen("0.0 10.0\n", "0.0 10.0 0.5\n", 1);
        let err = parse_dump::<f64, _>(text.as_bytes(), &cuzr(), 0.0).unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(_)), "{err}");
    }

    #[test]
    fn unknown_type_is_rejected() {
        let text = THREE_ATOMS.replace("2 2 4.5", "2 7 4.5");
        assert!(parse_dump::<f64, _>(text.as_bytes(), &cuzr(), 0.0).is_err());
    }

    #[test]
    fn join_assigns_by_id() {
        let table: BTreeMap<u64, f64> = [(0, -4.9)].into_iter().collect();
        let out = join_energies(vec![frame(0, 0.0, None)], &table).unwrap();
        assert_eq!(out[0].energy, Some(-4.9));
    }

    #[test]
    fn join_reports_missing_frame() {
        let table: BTreeMap<u64, f64> = [(0, -4.9)].into_iter().collect();
        let err =
            join_energies(vec![frame(0, 0.0, None), frame(7, 0.0, None)], &table).unwrap_err();
        assert!(matches!(&err, Error::MissingFrame(v) if v == &vec![7]));
        assert!(err.to_string().contains('7'));
    }

    #[test]
    fn join_matches_shuffled_table_by_id() {
        let csv = "frame_id,energy_eV\n3,-3.0\n0,-0.5\n4,-4.0\n1,-1.0\n2,-2.0\n";
        let table: BTreeMap<u64, f64> = read_energy_table(csv.as_bytes()).unwrap();
        let frames = (0..5).map(|i| frame(i, 0.0, None)).collect();
        let out = join_energies(frames, &table).unwrap();
        let expected = [-0.5, -1.0, -2.0, -3.0, -4.0];
        for (c, e) in out.iter().zip(expected) {
            assert_eq!(c.energy, Some(e));
        }
    }

    #[test]
    fn energy_table_rejects_bad_rows() {
        assert!(read_energy_table::<f64, _>("0,-1\n1,abc\n".as_bytes()).is_err());
        assert!(read_energy_table::<f64, _>("0,-1\n0,-2\n".as_bytes()).is_err());
        assert!(read_energy_table::<f64, _>("0,-1,3\n".as_bytes()).is_err());
    }

    #[test]
    fn normalizer_endpoints_and_midpoint() {
        let n = EnergyNormalizer::fit(&[-5.0_f64, -4.0]).unwrap();
        assert_eq!(n.normalize(-5.0), 0.0);
        assert_eq!(n.normalize(-4.0), 100.0);
        assert!((n.normalize(-4.5) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn normalizer_degenerate_range() {
        let n = EnergyNormalizer::fit(&[-5.0_f64, -5.0]).unwrap();
        assert_eq!(n.normalize(-5.0), 0.0);
        assert_eq!(n.normalize(-3.0), 0.0);
        assert!(EnergyNormalizer::<f64>::fit(&[]).is_err());
    }

    #[test]
    fn split_ten_frames() {
        let frames = (0..10)
            .map(|i| frame(i, 700.0, Some(-(i as f64))))
            .collect();
        let d = split_dataset(frames, vec!["Cu".into(), "Zr".into()], 0.8, 3).unwrap();
        assert_eq!(d.train().len(), 8);
        assert_eq!(d.test().len(), 2);
    }

    #[test]
    fn split_is_deterministic_and_stratified() {
        let make = || -> Vec<AtomicConfiguration<f64>> {
            (0..50)
                .map(|i| frame(i, 700.0 + 60.0 * (i % 5) as f64, Some(-(i as f64))))
                .collect()
        };
        let sp = vec!["Cu".to_string(), "Zr".to_string()];
        let a = split_dataset(make(), sp.clone(), 0.8, 9).unwrap();
        let b = split_dataset(make(), sp.clone(), 0.8, 9).unwrap();
        assert_eq!(a.split, b.split);
        for (_, tr, te) in a.summary() {
            assert_eq!((tr, te), (8, 2));
        }
        let train_e: Vec<f64> = a.train().iter().map(|c| c.energy.unwrap()).collect();
        let lo = train_e.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(a.energy_norm.e_min, lo);
    }

    #[test]
    fn split_argument_errors() {
        let sp = vec!["Cu".to_string(), "Zr".to_string()];
        assert!(split_dataset(vec![frame(0, 0.0, Some(1.0))], sp.clone(), 0.8, 0).is_err());
        let two = vec![frame(0, 0.0, Some(1.0)), frame(1, 0.0, Some(2.0))];
        assert!(split_dataset(two.clone(), sp.clone(), 1.0, 0).is_err());
        assert!(split_dataset(two, sp, 0.0, 0).is_err());
    }

    #[test]
    fn subsample_caps_each_temperature() {
        let frames: Vec<_> = (0..30)
            .map(|i| frame(i, (i % 3) as f64, Some(0.0)))
            .collect();
        let kept = subsample_per_temperature(frames, 4, 1);
        assert_eq!(kept.len(), 12);
        assert!(frames_per_temperature(&kept).values().all(|&n| n == 4));
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let frames = (0..6)
            .map(|i| frame(i, 700.0, Some(-4.9 - 0.01 * i as f64)))
            .collect();
        let d = split_dataset(frames, vec!["Cu".into(), "Zr".into()], 0.5, 1).unwrap();
        d.write(&path).unwrap();
        let back = Dataset::<f64>::read(&path).unwrap();
        assert_eq!(back, d);
        let first = std::fs::read_to_string(&path).unwrap();
        let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        let keys: Vec<&String> = line.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 6);
        for k in [
            "positions",
            "species",
            "box",
            "energy",
            "temperature_tag",
            "frame_id",
        ] {
            assert!(line.get(k).is_some(), "missing {k}");
        }
    }

    proptest! {
        #[test]
        fn normalizer_round_trip(lo in -10.0f64..0.0, width in 1e-3f64..5.0, t in 0.0f64..1.0) {
            let n = EnergyNormalizer::fit(&[lo, lo + width]).unwrap();
            let e = lo + t * width * 1.5 - 0.25 * width;
            let back = n.denormalize(n.normalize(e));
            prop_assert!((back - e).abs() <= 1e-9 * e.abs().max(1e-12));
        }

        #[test]
        fn dump_round_trip(
            pos in proptest::collection::vec((0.0f64..7.9, 0.0f64..8.3, 0.0f64..9.1), 2..20),
            id in 0u64..1_000_000,
            types in proptest::collection::vec(0usize..2, 20),
        ) {
            let species = cuzr();
            let labels = species.species();
            let config = AtomicConfiguration {
                positions: pos.iter().map(|&(x, y, z)| [x, y, z]).collect(),
                species: (0..pos.len()).map(|i| labels[types[i]].clone()).collect(),
                box_lengths: [8.0, 8.5, 9.25],
                energy: None,
                temperature_tag: 760.0,
                frame_id: id,
            };
            let text = write_dump(std::slice::from_ref(&config), &species).unwrap();
            let back: Vec<AtomicConfiguration<f64>> = parse_dump(text.as_bytes(), &species, 760.0).unwrap();
            prop_assert_eq!(back, vec![config]);
        }
    }
}
