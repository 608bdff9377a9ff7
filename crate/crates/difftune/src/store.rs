//! Durable append-only session log (`.btlog`): chromosome-level fitness
//! caching, crash recovery, and resumable sessions.
//!
//! One record per line, fields tab-separated, each line closed by the
//! CRC32C of its body in hex. Text over binary so sessions stay greppable
//! and torn writes stay detectable. Only tail truncation is repairable;
//! interior corruption refuses the file.
//!
//! Line grammar (`<crc>` covers every byte of the line before its tab):
//!
//! ```text
//! #BTLOG v1\tcatalog=..\tmanifest=..\tgenes=..\t<ga>\t<stop>\tcompressor=..\tbaseline=..\t<crc>
//! R\t<seq>\t<gen>\t<base>\t<genes-hex>\t<status>\t<digest|->\t<fitness>\t<dur-ns>\t<crc>
//! G\t<seq>\t<gen>\t<best-fitness>\t<evaluated>\t<rng-pos>\t<best>\t<population>\t<crc>
//! F\t<seq>\t<reason>\t<crc>
//! ```
//!
//! `G` lines checkpoint the generator's word position and the population
//! after each generation; a resumed session replays the log, drops any
//! records past the last checkpoint (those evaluations re-run from the
//! generation's start), and continues bit-identically.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::fitness::EvalStatus;
use crate::flagspace::Chromosome;
use crate::ga::{GaConfig, GenerationSummary, PlateauRule, StopReason, TerminationCriteria};

pub const HEADER_PREFIX: &str = "#BTLOG v1\t";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("session log already exists: {0}")]
    AlreadyExists(PathBuf),
    #[error("session log has no header: {0}")]
    MissingHeader(PathBuf),
    #[error("session log corrupt at line {line}: {msg}")]
    Corrupt { line: usize, msg: String },
    #[error("sequence integrity violation: {0}")]
    Integrity(String),
    #[error("session header mismatch; refusing to resume:\n{}", diffs.join("\n"))]
    HeaderMismatch { diffs: Vec<String> },
}

/// The reproducibility envelope, written exactly once as the first line.
/// Resumption requires an exact match on every field.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionHeader {
    pub catalog_digest: [u8; 32],
    pub manifest_hash: [u8; 32],
    pub gene_count: usize,
    pub ga: GaConfig,
    pub stop: TerminationCriteria,
    pub compressor: String,
    pub baseline_digest: [u8; 32],
}

impl SessionHeader {
    fn body(&self) -> String {
        let opt_u64 = |v: Option<u64>| v.map_or("-".to_string(), |x| x.to_string());
        let plateau = self
            .stop
            .plateau
            .as_ref()
            .map_or("-".to_string(), |p| format!("{}/{}", p.threshold, p.window));
        format!(
            "{HEADER_PREFIX}catalog={}\tmanifest={}\tgenes={}\tpop={}\tmut={}\tcross={}\tmmc={}\tstrength={}\telite={}\tseed={}\tmaxit={}\tmaxwall_ms={}\tplateau={}\tcompressor={}\tbaseline={}",
            hex::encode(self.catalog_digest),
            hex::encode(self.manifest_hash),
            self.gene_count,
            self.ga.population_size,
            self.ga.mutation_rate,
            self.ga.crossover_rate,
            self.ga.must_mutate_count,
            self.ga.crossover_strength,
            self.ga.elite_count,
            self.ga.seed,
            opt_u64(self.stop.max_iterations),
            opt_u64(self.stop.max_wall_clock.map(|d| d.as_millis() as u64)),
            plateau,
            self.compressor,
            hex::encode(self.baseline_digest),
        )
    }

    fn parse(body: &str) -> Result<Self, String> {
        let rest = body
            .strip_prefix(HEADER_PREFIX)
            .ok_or_else(|| format!("header must begin with {HEADER_PREFIX:?}"))?;
        let mut fields = HashMap::new();
        for part in rest.split('\t') {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("bad header field {part:?}"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| format!("missing header field {k}"));
        let digest = |k: &str| -> Result<[u8; 32], String> {
            let bytes = hex::decode(get(k)?).map_err(|e| format!("{k}: {e}"))?;
            bytes.try_into().map_err(|_| format!("{k}: expected 32 bytes"))
        };
        let num = |k: &str| -> Result<u64, String> { get(k)?.parse().map_err(|e| format!("{k}: {e}")) };
        let float = |k: &str| -> Result<f64, String> { get(k)?.parse().map_err(|e| format!("{k}: {e}")) };
        let opt_num = |k: &str| -> Result<Option<u64>, String> {
            let v = get(k)?;
            if v == "-" { Ok(None) } else { v.parse().map(Some).map_err(|e| format!("{k}: {e}")) }
        };
        let plateau = match get("plateau")? {
            "-" => None,
            spec => {
                let (t, w) = spec.split_once('/').ok_or_else(|| format!("plateau: bad spec {spec:?}"))?;
                Some(PlateauRule {
                    threshold: t.parse().map_err(|e| format!("plateau threshold: {e}"))?,
                    window: w.parse().map_err(|e| format!("plateau window: {e}"))?,
                })
            }
        };
        Ok(SessionHeader {
            catalog_digest: digest("catalog")?,
            manifest_hash: digest("manifest")?,
            gene_count: num("genes")? as usize,
            ga: GaConfig {
                population_size: num("pop")? as usize,
                mutation_rate: float("mut")?,
                crossover_rate: float("cross")?,
                must_mutate_count: num("mmc")? as usize,
                crossover_strength: float("strength")?,
                elite_count: num("elite")? as usize,
                seed: num("seed")?,
            },
            stop: TerminationCriteria {
                max_iterations: opt_num("maxit")?,
                max_wall_clock: opt_num("maxwall_ms")?.map(Duration::from_millis),
                plateau,
            },
            compressor: get("compressor")?.to_string(),
            baseline_digest: digest("baseline")?,
        })
    }

    /// Field-by-field differences against another header.
    pub fn diff(&self, other: &SessionHeader) -> Vec<String> {
        let mut out = Vec::new();
        let mut cmp = |name: &str, a: String, b: String| {
            if a != b {
                out.push(format!("  {name}: log has {a}, caller expects {b}"));
            }
        };
        cmp("catalog_digest", hex::encode(self.catalog_digest), hex::encode(other.catalog_digest));
        cmp("manifest_hash", hex::encode(self.manifest_hash), hex::encode(other.manifest_hash));
        cmp("gene_count", self.gene_count.to_string(), other.gene_count.to_string());
        cmp("ga", format!("{:?}", self.ga), format!("{:?}", other.ga));
        cmp("stop", format!("{:?}", self.stop), format!("{:?}", other.stop));
        cmp("compressor", self.compressor.clone(), other.compressor.clone());
        cmp("baseline_digest", hex::encode(self.baseline_digest), hex::encode(other.baseline_digest));
        out
    }
}

/// One evaluated chromosome; the persisted unit.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub seq: u64,
    pub generation: u64,
    pub chromosome: Chromosome,
    pub status: EvalStatus,
    pub binary_digest: Option<[u8; 32]>,
    pub fitness: f64,
    pub duration: Duration,
}

/// Per-generation checkpoint enabling bit-identical resume.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub seq: u64,
    pub summary: GenerationSummary,
    pub rng_word_pos: u128,
    pub population: Vec<Chromosome>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Iteration(IterationRecord),
    Generation(GenerationRecord),
    Finish { seq: u64, reason: StopReason },
}

impl Record {
    pub fn seq(&self) -> u64 {
        match self {
            Record::Iteration(r) => r.seq,
            Record::Generation(g) => g.seq,
            Record::Finish { seq, .. } => *seq,
        }
    }
}

/// Cached evaluation for a chromosome under this session's header.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub fitness: f64,
    pub status: EvalStatus,
    pub seq: u64,
    pub binary_digest: Option<[u8; 32]>,
}

/// Engine-ready state recovered from a session log.
#[derive(Debug, Clone)]
pub struct ResumeState {
    pub history: Vec<GenerationSummary>,
    pub population: Vec<Chromosome>,
    pub rng_word_pos: u128,
    pub finished: Option<StopReason>,
}

fn crc_of(body: &str) -> String {
    format!("{:08x}", crc32c::crc32c(body.as_bytes()))
}

fn seal(body: String) -> String {
    let crc = crc_of(&body);
    format!("{body}\t{crc}\n")
}

/// Splits a complete line into (body, crc) and validates the checksum.
fn unseal(line: &str) -> Result<&str, String> {
    let (body, crc) = line.rsplit_once('\t').ok_or("no checksum field")?;
    if crc.len() != 8 || crc_of(body) != crc {
        return Err(format!("checksum mismatch (stored {crc:?})"));
    }
    Ok(body)
}

fn format_f64(v: f64) -> String {
    // shortest round-trip formatting; stable across runs
    format!("{v}")
}

fn chrom_token(c: &Chromosome) -> String {
    format!("{}:{}", c.base_level, c.genes_hex())
}

fn parse_chrom_token(tok: &str, gene_count: usize) -> Result<Chromosome, String> {
    let (base, genes) = tok.split_once(':').ok_or_else(|| format!("bad chromosome token {tok:?}"))?;
    let base: usize = base.parse().map_err(|e| format!("base level: {e}"))?;
    Chromosome::from_hex(base, genes, gene_count).map_err(|e| e.to_string())
}

fn iteration_body(r: &IterationRecord) -> String {
    format!(
        "R\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.seq,
        r.generation,
        r.chromosome.base_level,
        r.chromosome.genes_hex(),
        r.status.as_str(),
        r.binary_digest.map_or("-".to_string(), hex::encode),
        format_f64(r.fitness),
        r.duration.as_nanos(),
    )
}

fn generation_body(g: &GenerationRecord) -> String {
    let population: Vec<String> = g.population.iter().map(chrom_token).collect();
    format!(
        "G\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        g.seq,
        g.summary.index,
        format_f64(g.summary.best_fitness),
        g.summary.evaluated_count,
        g.rng_word_pos,
        chrom_token(&g.summary.best_chromosome),
        population.join(","),
    )
}

fn parse_record(body: &str, gene_count: usize) -> Result<Record, String> {
    let fields: Vec<&str> = body.split('\t').collect();
    let expect = |n: usize| {
        if fields.len() == n {
            Ok(())
        } else {
            Err(format!("expected {n} fields, got {}", fields.len()))
        }
    };
    match fields[0] {
        "R" => {
            expect(9)?;
            let digest = match fields[6] {
                "-" => None,
                hexstr => {
                    let bytes = hex::decode(hexstr).map_err(|e| format!("digest: {e}"))?;
                    Some(bytes.try_into().map_err(|_| "digest: expected 32 bytes".to_string())?)
                }
            };
            Ok(Record::Iteration(IterationRecord {
                seq: fields[1].parse().map_err(|e| format!("seq: {e}"))?,
                generation: fields[2].parse().map_err(|e| format!("generation: {e}"))?,
                chromosome: Chromosome::from_hex(
                    fields[3].parse().map_err(|e| format!("base level: {e}"))?,
                    fields[4],
                    gene_count,
                )
                .map_err(|e| e.to_string())?,
                status: EvalStatus::parse(fields[5]).ok_or_else(|| format!("bad status {:?}", fields[5]))?,
                binary_digest: digest,
                fitness: fields[7].parse().map_err(|e| format!("fitness: {e}"))?,
                duration: Duration::from_nanos(fields[8].parse().map_err(|e| format!("duration: {e}"))?),
            }))
        }
        "G" => {
            expect(8)?;
            let population = fields[7]
                .split(',')
                .map(|tok| parse_chrom_token(tok, gene_count))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Record::Generation(GenerationRecord {
                seq: fields[1].parse().map_err(|e| format!("seq: {e}"))?,
                summary: GenerationSummary {
                    index: fields[2].parse().map_err(|e| format!("index: {e}"))?,
                    best_fitness: fields[3].parse().map_err(|e| format!("best: {e}"))?,
                    best_chromosome: parse_chrom_token(fields[6], gene_count)?,
                    evaluated_count: fields[4].parse().map_err(|e| format!("evaluated: {e}"))?,
                },
                rng_word_pos: fields[5].parse().map_err(|e| format!("rng pos: {e}"))?,
                population,
            }))
        }
        "F" => {
            expect(3)?;
            Ok(Record::Finish {
                seq: fields[1].parse().map_err(|e| format!("seq: {e}"))?,
                reason: StopReason::parse(fields[2]).ok_or_else(|| format!("bad reason {:?}", fields[2]))?,
            })
        }
        other => Err(format!("unknown record tag {other:?}")),
    }
}

struct Scan {
    header: SessionHeader,
    records: Vec<Record>,
    /// Byte length of the valid prefix (header plus complete records).
    valid_len: u64,
    /// Whether bytes past `valid_len` existed (a torn tail).
    torn: bool,
}

/// Validates the log sequentially. A single invalid tail is tolerated and
/// reported via `torn`; an invalid line followed by a valid one is
/// interior corruption and refuses the file.
fn scan_log(path: &Path, data: &str) -> Result<Scan, StoreError> {
    let mut lines = Vec::new(); // (line_no, start_offset, contents incl \n?)
    let mut offset = 0usize;
    for (idx, line) in data.split_inclusive('\n').enumerate() {
        lines.push((idx + 1, offset, line));
        offset += line.len();
    }
    if lines.is_empty() {
        return Err(StoreError::MissingHeader(path.to_path_buf()));
    }

    let (_, _, first) = lines[0];
    if !first.ends_with('\n') {
        return Err(StoreError::MissingHeader(path.to_path_buf()));
    }
    let header_body = unseal(first.trim_end_matches('\n'))
        .map_err(|msg| StoreError::Corrupt { line: 1, msg })?;
    let header = SessionHeader::parse(header_body)
        .map_err(|msg| StoreError::Corrupt { line: 1, msg })?;

    let mut records = Vec::new();
    let mut valid_len = first.len() as u64;
    let mut invalid_at: Option<(usize, String)> = None;
    for &(line_no, start, line) in &lines[1..] {
        let complete = line.ends_with('\n');
        let parsed = if !complete {
            Err("truncated line (missing newline)".to_string())
        } else {
            unseal(line.trim_end_matches('\n')).and_then(|body| parse_record(body, header.gene_count))
        };
        match parsed {
            Ok(record) => {
                if invalid_at.is_some() {
                    let (bad_line, msg) = invalid_at.unwrap();
                    return Err(StoreError::Corrupt {
                        line: bad_line,
                        msg: format!("{msg} (followed by valid records; only tail truncation is repairable)"),
                    });
                }
                let expected = records.last().map_or(1, |r: &Record| r.seq() + 1);
                if record.seq() != expected {
                    return Err(StoreError::Corrupt {
                        line: line_no,
                        msg: format!("sequence {} where {expected} was expected", record.seq()),
                    });
                }
                if matches!(records.last(), Some(Record::Finish { .. })) {
                    return Err(StoreError::Corrupt {
                        line: line_no,
                        msg: "record after finish marker".to_string(),
                    });
                }
                valid_len = (start + line.len()) as u64;
                records.push(record);
            }
            Err(msg) => {
                if invalid_at.is_none() {
                    invalid_at = Some((line_no, msg));
                }
            }
        }
    }
    Ok(Scan { header, records, valid_len, torn: invalid_at.is_some() })
}

/// Single-writer, flush-per-append session log with an in-memory
/// evaluation cache over its own records.
#[derive(Debug)]
pub struct Store {
    file: File,
    path: PathBuf,
    header: SessionHeader,
    next_seq: u64,
    cache: HashMap<(usize, Vec<u8>), CacheEntry>,
    records: Vec<IterationRecord>,
}

impl Store {
    /// Creates a new session log; refuses to overwrite an existing one.
    pub fn create(path: &Path, header: SessionHeader) -> Result<Store, StoreError> {
        if path.exists() {
            return Err(StoreError::AlreadyExists(path.to_path_buf()));
        }
        let io = |source| StoreError::Io { path: path.to_path_buf(), source };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(io)?;
            }
        }
        let mut file = OpenOptions::new().create_new(true).read(true).write(true).open(path).map_err(io)?;
        let line = seal(header.body());
        file.write_all(line.as_bytes()).map_err(io)?;
        file.sync_data().map_err(io)?;
        Ok(Store {
            file,
            path: path.to_path_buf(),
            header,
            next_seq: 1,
            cache: HashMap::new(),
            records: Vec::new(),
        })
    }

    /// Opens an existing log for resumption: validates the header against
    /// the caller's expectation, repairs a torn tail, drops records past
    /// the last generation checkpoint (their evaluations re-run), and
    /// returns the recovered engine state.
    pub fn open_resume(path: &Path, expected: &SessionHeader) -> Result<(Store, ResumeState), StoreError> {
        let io = |source| StoreError::Io { path: path.to_path_buf(), source };
        let mut file = OpenOptions::new().read(true).write(true).open(path).map_err(io)?;
        let mut data = String::new();
        file.read_to_string(&mut data).map_err(io)?;
        let scan = scan_log(path, &data)?;
        if &scan.header != expected {
            return Err(StoreError::HeaderMismatch { diffs: scan.header.diff(expected) });
        }

        // keep everything up to the last checkpoint (or the finish marker)
        let keep = match scan.records.iter().rposition(|r| !matches!(r, Record::Iteration(_))) {
            Some(last_checkpoint) => last_checkpoint + 1,
            None => 0,
        };
        let mut truncate_to = scan.valid_len;
        if keep < scan.records.len() {
            // recompute the byte length of the prefix being kept
            let mut len = seal(scan.header.body()).len() as u64;
            for r in &scan.records[..keep] {
                len += record_line_len(r);
            }
            truncate_to = len;
        }
        if scan.torn || truncate_to != data.len() as u64 {
            file.set_len(truncate_to).map_err(io)?;
        }
        file.seek(SeekFrom::Start(truncate_to)).map_err(io)?;

        let mut cache = HashMap::new();
        let mut records = Vec::new();
        let mut history = Vec::new();
        let mut population = Vec::new();
        let mut rng_word_pos = 0u128;
        let mut finished = None;
        for record in &scan.records[..keep] {
            match record {
                Record::Iteration(r) => {
                    cache_insert(&mut cache, r);
                    records.push(r.clone());
                }
                Record::Generation(g) => {
                    history.push(g.summary.clone());
                    population = g.population.clone();
                    rng_word_pos = g.rng_word_pos;
                }
                Record::Finish { reason, .. } => finished = Some(*reason),
            }
        }
        let next_seq = scan.records[..keep].last().map_or(1, |r| r.seq() + 1);
        let store = Store {
            file,
            path: path.to_path_buf(),
            header: scan.header,
            next_seq,
            cache,
            records,
        };
        Ok((store, ResumeState { history, population, rng_word_pos, finished }))
    }

    /// Strict read of a completed or in-progress log for analysis; any
    /// invalid line fails with its line number.
    pub fn read(path: &Path) -> Result<(SessionHeader, Vec<Record>), StoreError> {
        let io = |source| StoreError::Io { path: path.to_path_buf(), source };
        let data = std::fs::read_to_string(path).map_err(io)?;
        let scan = scan_log(path, &data)?;
        if scan.torn || scan.valid_len != data.len() as u64 {
            let line = data[..scan.valid_len as usize].lines().count() + 1;
            return Err(StoreError::Corrupt { line, msg: "invalid record".to_string() });
        }
        Ok((scan.header, scan.records))
    }

    pub fn header(&self) -> &SessionHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// The sequence number the next append must carry.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn iteration_records(&self) -> &[IterationRecord] {
        &self.records
    }

    /// Cached fitness for a byte-identical chromosome under this header.
    pub fn lookup(&self, chromosome: &Chromosome) -> Option<&CacheEntry> {
        self.cache.get(&(chromosome.base_level, chromosome.packed_genes()))
    }

    fn append_line(&mut self, seq: u64, body: String) -> Result<u64, StoreError> {
        if seq != self.next_seq {
            return Err(StoreError::Integrity(format!(
                "append with sequence {seq} where {} was expected",
                self.next_seq
            )));
        }
        let io = |source| StoreError::Io { path: self.path.clone(), source };
        let line = seal(body);
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.sync_data().map_err(io)?;
        self.next_seq += 1;
        Ok(seq)
    }

    /// Appends one evaluation record; durable before return.
    pub fn append_iteration(&mut self, record: &IterationRecord) -> Result<u64, StoreError> {
        let seq = self.append_line(record.seq, iteration_body(record))?;
        cache_insert(&mut self.cache, record);
        self.records.push(record.clone());
        Ok(seq)
    }

    /// Appends the generation checkpoint (summary, RNG position,
    /// population snapshot).
    pub fn append_generation(
        &mut self,
        summary: &GenerationSummary,
        rng_word_pos: u128,
        population: &[Chromosome],
    ) -> Result<u64, StoreError> {
        let record = GenerationRecord {
            seq: self.next_seq,
            summary: summary.clone(),
            rng_word_pos,
            population: population.to_vec(),
        };
        self.append_line(record.seq, generation_body(&record))
    }

    pub fn append_finish(&mut self, reason: StopReason) -> Result<u64, StoreError> {
        let seq = self.next_seq;
        self.append_line(seq, format!("F\t{seq}\t{}", reason.as_str()))
    }
}

fn record_line_len(record: &Record) -> u64 {
    let body = match record {
        Record::Iteration(r) => iteration_body(r),
        Record::Generation(g) => generation_body(g),
        Record::Finish { seq, reason } => format!("F\t{seq}\t{}", reason.as_str()),
    };
    seal(body).len() as u64
}

fn cache_insert(cache: &mut HashMap<(usize, Vec<u8>), CacheEntry>, r: &IterationRecord) {
    cache
        .entry((r.chromosome.base_level, r.chromosome.packed_genes()))
        .or_insert(CacheEntry {
            fitness: r.fitness,
            status: r.status,
            seq: r.seq,
            binary_digest: r.binary_digest,
        });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(gene_count: usize) -> SessionHeader {
        SessionHeader {
            catalog_digest: [1; 32],
            manifest_hash: [2; 32],
            gene_count,
            ga: GaConfig::default(),
            stop: TerminationCriteria::default(),
            compressor: "xz:6".into(),
            baseline_digest: [3; 32],
        }
    }

    fn record(seq: u64, generation: u64, bits: &[u8], fitness: f64) -> IterationRecord {
        IterationRecord {
            seq,
            generation,
            chromosome: Chromosome::new(0, bits.iter().map(|&b| b != 0).collect()),
            status: EvalStatus::Ok,
            binary_digest: Some([7; 32]),
            fitness,
            duration: Duration::from_nanos(1234),
        }
    }

    fn summary(index: u64, best: f64) -> GenerationSummary {
        GenerationSummary {
            index,
            best_fitness: best,
            best_chromosome: Chromosome::new(0, vec![true, false, false, false]),
            evaluated_count: 2,
        }
    }

    #[test]
    fn first_record_after_header_is_sequence_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.btlog");
        let mut store = Store::create(&path, header(4)).unwrap();
        assert_eq!(store.next_seq(), 1);
        let seq = store.append_iteration(&record(1, 0, &[1, 0, 0, 0], 0.5)).unwrap();
        assert_eq!(seq, 1);
    }

    #[test]
    fn out_of_order_append_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::create(&dir.path().join("s.btlog"), header(4)).unwrap();
        let err = store.append_iteration(&record(3, 0, &[0, 0, 0, 0], 0.1)).unwrap_err();
        assert!(matches!(err, StoreError::Integrity(_)));
    }

    #[test]
    fn lookup_hits_recorded_chromosomes_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::create(&dir.path().join("s.btlog"), header(4)).unwrap();
        let rec = record(1, 0, &[1, 1, 0, 0], 0.75);
        store.append_iteration(&rec).unwrap();
        let hit = store.lookup(&rec.chromosome).unwrap();
        assert_eq!(hit.fitness, 0.75);
        assert_eq!(hit.seq, 1);
        assert!(store.lookup(&Chromosome::new(0, vec![false; 4])).is_none());
        // same gene bits under a different base level is a different key
        assert!(store.lookup(&Chromosome::new(1, rec.chromosome.genes.clone())).is_none());
    }

    #[test]
    fn record_round_trips_through_the_line_format() {
        let mut r = record(1, 3, &[1, 0, 1, 1], 0.123456789);
        r.status = EvalStatus::CompileError;
        r.binary_digest = None;
        r.fitness = -1.0;
        let body = iteration_body(&r);
        match parse_record(&body, 4).unwrap() {
            Record::Iteration(back) => assert_eq!(back, r),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resume_recovers_cache_history_and_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.btlog");
        let h = header(4);
        {
            let mut store = Store::create(&path, h.clone()).unwrap();
            store.append_iteration(&record(1, 0, &[1, 0, 0, 0], 0.5)).unwrap();
            store.append_iteration(&record(2, 0, &[0, 1, 0, 0], 0.6)).unwrap();
            store
                .append_generation(&summary(0, 0.6), 42, &[Chromosome::new(0, vec![true, false, false, false])])
                .unwrap();
        }
        let (store, state) = Store::open_resume(&path, &h).unwrap();
        assert_eq!(store.next_seq(), 4);
        assert_eq!(store.iteration_records().len(), 2);
        assert_eq!(state.history.len(), 1);
        assert_eq!(state.rng_word_pos, 42);
        assert_eq!(state.population.len(), 1);
        assert!(state.finished.is_none());
    }

    #[test]
    fn resume_refuses_header_mismatch_with_field_diff() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.btlog");
        Store::create(&path, header(4)).unwrap();
        let mut edited = header(4);
        edited.ga.mutation_rate = 0.25;
        match Store::open_resume(&path, &edited) {
            Err(StoreError::HeaderMismatch { diffs }) => {
                assert!(diffs.iter().any(|d| d.contains("ga")), "{diffs:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resume_of_empty_file_is_missing_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.btlog");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(
            Store::open_resume(&path, &header(4)),
            Err(StoreError::MissingHeader(_))
        ));
    }

    #[test]
    fn torn_tail_is_truncated_at_every_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.btlog");
        let h = header(4);
        {
            let mut store = Store::create(&path, h.clone()).unwrap();
            store.append_iteration(&record(1, 0, &[1, 0, 0, 0], 0.5)).unwrap();
            store
                .append_generation(&summary(0, 0.5), 7, &[Chromosome::new(0, vec![true, false, false, false])])
                .unwrap();
            store.append_iteration(&record(3, 1, &[1, 1, 0, 0], 0.7)).unwrap();
        }
        let full = std::fs::read(&path).unwrap();
        let last_line_start = full[..full.len() - 1]
            .iter()
            .rposition(|&b| b == b'\n')
            .map(|i| i + 1)
            .unwrap();

        for cut in last_line_start + 1..full.len() {
            let torn_path = dir.path().join(format!("torn-{cut}.btlog"));
            std::fs::write(&torn_path, &full[..cut]).unwrap();
            let (mut store, state) = Store::open_resume(&torn_path, &h).unwrap();
            // the torn record 3 is gone; the next append is sequence 3
            assert_eq!(store.next_seq(), 3, "cut {cut}");
            assert_eq!(state.history.len(), 1);
            store.append_iteration(&record(3, 1, &[1, 1, 0, 0], 0.7)).unwrap();
        }
    }

    #[test]
    fn records_past_last_checkpoint_are_dropped_on_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.btlog");
        let h = header(4);
        {
            let mut store = Store::create(&path, h.clone()).unwrap();
            store.append_iteration(&record(1, 0, &[1, 0, 0, 0], 0.5)).unwrap();
            store
                .append_generation(&summary(0, 0.5), 7, &[Chromosome::new(0, vec![true, false, false, false])])
                .unwrap();
            store.append_iteration(&record(3, 1, &[1, 1, 0, 0], 0.7)).unwrap();
            store.append_iteration(&record(4, 1, &[0, 1, 1, 0], 0.2)).unwrap();
        }
        let before = std::fs::read(&path).unwrap();
        let (store, _) = Store::open_resume(&path, &h).unwrap();
        assert_eq!(store.next_seq(), 3);
        assert_eq!(store.iteration_records().len(), 1);
        let after = std::fs::read(&path).unwrap();
        assert!(after.len() < before.len());
        assert_eq!(&before[..after.len()], &after[..]);
    }

    #[test]
    fn interior_corruption_refuses_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.btlog");
        let h = header(4);
        {
            let mut store = Store::create(&path, h.clone()).unwrap();
            store.append_iteration(&record(1, 0, &[1, 0, 0, 0], 0.5)).unwrap();
            store.append_iteration(&record(2, 0, &[0, 1, 0, 0], 0.6)).unwrap();
        }
        let mut data = std::fs::read_to_string(&path).unwrap();
        // flip a byte inside the second line (line 2 of the file)
        let target = data.lines().nth(1).unwrap().as_ptr() as usize - data.as_ptr() as usize + 3;
        unsafe { data.as_bytes_mut()[target] ^= 0x01 };
        std::fs::write(&path, &data).unwrap();
        assert!(matches!(
            Store::open_resume(&path, &h),
            Err(StoreError::Corrupt { line: 2, .. })
        ));
    }

    #[test]
    fn finished_session_reports_reason() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.btlog");
        let h = header(4);
        {
            let mut store = Store::create(&path, h.clone()).unwrap();
            store.append_iteration(&record(1, 0, &[0, 0, 0, 0], 0.4)).unwrap();
            store
                .append_generation(&summary(0, 0.4), 9, &[Chromosome::new(0, vec![false; 4])])
                .unwrap();
            store.append_finish(StopReason::Plateau).unwrap();
        }
        let (_, state) = Store::open_resume(&path, &h).unwrap();
        assert_eq!(state.finished, Some(StopReason::Plateau));
        let (_, records) = Store::read(&path).unwrap();
        assert!(matches!(records.last(), Some(Record::Finish { reason: StopReason::Plateau, .. })));
    }

    #[test]
    fn header_round_trips() {
        let h = SessionHeader {
            catalog_digest: [0xAB; 32],
            manifest_hash: [0xCD; 32],
            gene_count: 37,
            ga: GaConfig {
                population_size: 11,
                mutation_rate: 0.125,
                crossover_rate: 0.875,
                must_mutate_count: 2,
                crossover_strength: 0.3,
                elite_count: 3,
                seed: u64::MAX,
            },
            stop: TerminationCriteria {
                max_iterations: Some(500),
                max_wall_clock: Some(Duration::from_millis(90_000)),
                plateau: Some(PlateauRule { threshold: 0.0035, window: 10 }),
            },
            compressor: "zstd:3".into(),
            baseline_digest: [0xEF; 32],
        };
        let parsed = SessionHeader::parse(&h.body()).unwrap();
        assert_eq!(parsed, h);
        assert!(h.diff(&parsed).is_empty());
    }
}
