//! Normalized compression distance between two binaries' code sections,
//! and its adaptation into the search's fitness contract against a fixed
//! baseline build.
//!
//! NCD(x, y) = (C(x·y) − min(C(x), C(y))) / max(C(x), C(y)) where C is the
//! compressed length under the session's compressor and x·y is byte
//! concatenation. The score is computed exactly as written: no
//! symmetrization and no clamping. Scores are only comparable within one
//! compressor configuration.

use std::fmt;
use std::io::Read;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::elf::{self, ElfError};

/// Fitness assigned to chromosomes that fail to compile: below any valid
/// NCD score, so search pressure steers away from fragile flag regions.
pub const COMPILE_FAILURE_FITNESS: f64 = -1.0;

/// Upper bound on real-compressor overhead above the theoretical NCD
/// range of [0, 1].
pub const NCD_OVERHEAD_BOUND: f64 = 1.1;

#[derive(Debug, Error)]
pub enum FitnessError {
    #[error("code section extraction failed: {0}")]
    Extraction(#[from] ElfError),
    #[error("empty code section from {0}")]
    EmptySection(String),
    #[error("internal: zero compressed length for non-empty input")]
    ZeroCompressedLength,
    #[error("internal: NCD {0} exceeds the real-compressor overhead bound {NCD_OVERHEAD_BOUND}")]
    OverheadBoundExceeded(f64),
    #[error("infrastructure failure during fitness evaluation: {0}")]
    Infrastructure(String),
}

/// How the scored byte section is obtained from a compiled artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractionMode {
    /// Parse the ELF section header table and take the `.text` bytes.
    ElfText,
    /// Score the whole file as-is.
    WholeFile,
}

impl ExtractionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "elf_text" => Some(Self::ElfText),
            "whole_file" => Some(Self::WholeFile),
            _ => None,
        }
    }
}

impl fmt::Display for ExtractionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ElfText => "elf_text",
            Self::WholeFile => "whole_file",
        })
    }
}

/// The executable-section bytes of one binary, plus where they came from.
#[derive(Debug, Clone)]
pub struct CodeSection {
    bytes: Vec<u8>,
    /// SHA-256 of the source binary plus the extraction mode.
    origin: String,
}

impl CodeSection {
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(&self.bytes).into()
    }

    /// Test/tool constructor for sections that did not come from a binary.
    pub fn from_raw(bytes: Vec<u8>, origin: &str) -> Self {
        Self { bytes, origin: origin.to_string() }
    }
}

/// Extracts the section to score from a compiled binary.
pub fn extract_code_section(binary: &[u8], mode: ExtractionMode) -> Result<CodeSection, FitnessError> {
    let source_digest = hex::encode(Sha256::digest(binary));
    let bytes = match mode {
        ExtractionMode::ElfText => elf::extract_text_section(binary)?,
        ExtractionMode::WholeFile => binary.to_vec(),
    };
    if bytes.is_empty() {
        return Err(FitnessError::EmptySection(format!("{source_digest}/{mode}")));
    }
    Ok(CodeSection { bytes, origin: format!("{source_digest}/{mode}") })
}

/// The lossless compressor behind C(x). One session uses exactly one
/// compressor for all NCD computations.
///
/// The default is the LZMA-class `xz` encoder at preset 6 (8 MiB
/// dictionary, covering sections up to 8 MiB). `Zstd` is offered for
/// high-iteration hermetic sessions where xz's throughput would dominate
/// the run; its window likewise spans the concatenated inputs at the
/// sizes those sessions use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompressorId {
    Xz { preset: u32 },
    Zstd { level: i32 },
}

impl Default for CompressorId {
    fn default() -> Self {
        CompressorId::Xz { preset: 6 }
    }
}

impl CompressorId {
    pub fn parse(s: &str) -> Option<Self> {
        let (algo, param) = s.split_once(':')?;
        match algo {
            "xz" => Some(CompressorId::Xz { preset: param.parse().ok().filter(|p| *p <= 9)? }),
            "zstd" => Some(CompressorId::Zstd { level: param.parse().ok().filter(|l| (1..=22).contains(l))? }),
            _ => None,
        }
    }
}

impl fmt::Display for CompressorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressorId::Xz { preset } => write!(f, "xz:{preset}"),
            CompressorId::Zstd { level } => write!(f, "zstd:{level}"),
        }
    }
}

/// Length in bytes of the compressed stream. Deterministic for a fixed
/// compressor id. A fresh compressor context is created per call.
pub fn compressed_len(data: &[u8], compressor: CompressorId) -> usize {
    match compressor {
        CompressorId::Xz { preset } => {
            let mut enc = xz2::read::XzEncoder::new(data, preset);
            let mut n = 0usize;
            let mut buf = [0u8; 64 * 1024];
            loop {
                match enc.read(&mut buf) {
                    Ok(0) => break,
                    Ok(k) => n += k,
                    Err(e) => unreachable!("in-memory xz read cannot fail: {e}"),
                }
            }
            n
        }
        CompressorId::Zstd { level } => {
            zstd::bulk::compress(data, level)
                .expect("in-memory zstd compression cannot fail")
                .len()
        }
    }
}

/// An NCD value as produced by [`ncd`]: non-negative, bounded by the
/// real-compressor overhead allowance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NcdScore(f64);

impl NcdScore {
    pub fn value(&self) -> f64 {
        self.0
    }
}

impl fmt::Display for NcdScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.0)
    }
}

/// NCD(x, y) = (C(x·y) − min(C(x), C(y))) / max(C(x), C(y)).
///
/// The raw quotient is reported; consumers may clamp for display. The
/// asymmetry |ncd(x,y) − ncd(y,x)| of a real compressor is measurable but
/// small; callers wanting it can invoke this twice.
pub fn ncd(x: &CodeSection, y: &CodeSection, compressor: CompressorId) -> Result<NcdScore, FitnessError> {
    if x.bytes.is_empty() {
        return Err(FitnessError::EmptySection(x.origin.clone()));
    }
    if y.bytes.is_empty() {
        return Err(FitnessError::EmptySection(y.origin.clone()));
    }
    let cx = compressed_len(&x.bytes, compressor) as f64;
    let cy = compressed_len(&y.bytes, compressor) as f64;
    let mut xy = Vec::with_capacity(x.bytes.len() + y.bytes.len());
    xy.extend_from_slice(&x.bytes);
    xy.extend_from_slice(&y.bytes);
    let cxy = compressed_len(&xy, compressor) as f64;
    if cx.max(cy) == 0.0 {
        return Err(FitnessError::ZeroCompressedLength);
    }
    let value = (cxy - cx.min(cy)) / cx.max(cy);
    if !(0.0..=NCD_OVERHEAD_BOUND).contains(&value) {
        return Err(FitnessError::OverheadBoundExceeded(value));
    }
    Ok(NcdScore(value))
}

/// Result of compiling one chromosome, as seen by the fitness adapter.
pub enum CompiledArtifact {
    /// Binary bytes of the compiled output.
    Binary(Vec<u8>),
    /// The compiler rejected this flag combination (or timed out).
    CompileFailed,
}

/// One evaluated chromosome: everything the engine persists about it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalStatus {
    Ok,
    CompileError,
    Timeout,
}

impl EvalStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalStatus::Ok => "ok",
            EvalStatus::CompileError => "compile_error",
            EvalStatus::Timeout => "timeout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(EvalStatus::Ok),
            "compile_error" => Some(EvalStatus::CompileError),
            "timeout" => Some(EvalStatus::Timeout),
            _ => None,
        }
    }
}

/// Compiles a chromosome via `compile_fn`, extracts its code section, and
/// scores it against the baseline. Compile failure yields the failure
/// floor; extraction failure on a successfully compiled binary is an
/// infrastructure error and aborts rather than scoring.
pub fn fitness_against_baseline<F>(
    compile_fn: F,
    baseline: &CodeSection,
    mode: ExtractionMode,
    compressor: CompressorId,
) -> Result<(f64, Option<[u8; 32]>), FitnessError>
where
    F: FnOnce() -> Result<CompiledArtifact, FitnessError>,
{
    match compile_fn()? {
        CompiledArtifact::CompileFailed => Ok((COMPILE_FAILURE_FITNESS, None)),
        CompiledArtifact::Binary(bytes) => {
            let digest: [u8; 32] = Sha256::digest(&bytes).into();
            let section = extract_code_section(&bytes, mode).map_err(|e| {
                FitnessError::Infrastructure(format!(
                    "compiled binary {} has no scoreable section: {e}",
                    hex::encode(&digest[..8])
                ))
            })?;
            let score = ncd(&section, baseline, compressor)?;
            Ok((score.value(), Some(digest)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_bytes(seed: u64, len: usize) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = vec![0u8; len];
        rng.fill_bytes(&mut v);
        v
    }

    fn sec(seed: u64, len: usize) -> CodeSection {
        CodeSection::from_raw(random_bytes(seed, len), "test")
    }

    #[test]
    fn extract_text_from_assembled_fixture() {
        // assembled once with GNU as; contents confirmed by objdump -s
        let fixture = include_bytes!("../testdata/nop16_x86_64.elf");
        let s = extract_code_section(fixture, ExtractionMode::ElfText).unwrap();
        assert_eq!(s.bytes(), &[0x90u8; 16]);
        let fixture32 = include_bytes!("../testdata/nop16_i386.elf");
        let s32 = extract_code_section(fixture32, ExtractionMode::ElfText).unwrap();
        assert_eq!(s32.bytes(), &[0x90u8; 16]);
    }

    #[test]
    fn whole_file_mode_is_identity() {
        let data = random_bytes(1, 4096);
        let s = extract_code_section(&data, ExtractionMode::WholeFile).unwrap();
        assert_eq!(s.bytes(), &data[..]);
    }

    #[test]
    fn extract_rejects_non_elf_in_elf_mode() {
        assert!(matches!(
            extract_code_section(b"ELF\0", ExtractionMode::ElfText),
            Err(FitnessError::Extraction(_))
        ));
    }

    #[test]
    fn compressed_len_of_empty_input_is_the_frozen_header_constant() {
        // header-only stream lengths observed once for the pinned crate
        // versions and frozen here
        assert_eq!(compressed_len(&[], CompressorId::Xz { preset: 6 }), 32);
        assert_eq!(compressed_len(&[], CompressorId::Zstd { level: 3 }), 9);
    }

    #[test]
    fn compressed_len_collapses_runs() {
        let run = vec![0x5Au8; 1 << 20];
        for comp in [CompressorId::default(), CompressorId::Zstd { level: 3 }] {
            let len = compressed_len(&run, comp);
            assert!(len < run.len() / 100, "{comp}: {len}");
        }
    }

    #[test]
    fn compressed_len_keeps_random_data_nearly_whole() {
        let data = random_bytes(42, 64 << 10);
        for comp in [CompressorId::default(), CompressorId::Zstd { level: 3 }] {
            let len = compressed_len(&data, comp);
            assert!(len > data.len() * 99 / 100, "{comp}: {len}");
        }
    }

    #[test]
    fn ncd_of_identical_sections_is_near_zero() {
        for (seed, len) in [(1u64, 1 << 10), (2, 64 << 10), (3, 1 << 20)] {
            let x = sec(seed, len);
            let v = ncd(&x, &x, CompressorId::default()).unwrap().value();
            assert!(v <= 0.05, "len {len}: {v}");
        }
    }

    #[test]
    fn ncd_separates_identical_perturbed_and_independent() {
        let x = sec(10, 64 << 10);
        let mut perturbed = x.bytes().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..perturbed.len() / 100 {
            let i = (rng.next_u64() as usize) % perturbed.len();
            perturbed[i] = perturbed[i].wrapping_add(1);
        }
        let p = CodeSection::from_raw(perturbed, "perturbed");
        let y = sec(12, 64 << 10);
        let comp = CompressorId::default();
        let same = ncd(&x, &x, comp).unwrap().value();
        let near = ncd(&x, &p, comp).unwrap().value();
        let far = ncd(&x, &y, comp).unwrap().value();
        assert!(same < near && near < far, "{same} {near} {far}");
        assert!(far >= 0.9);
    }

    #[test]
    fn ncd_is_deterministic() {
        let x = sec(7, 32 << 10);
        let y = sec(8, 32 << 10);
        for comp in [CompressorId::default(), CompressorId::Zstd { level: 1 }] {
            let a = ncd(&x, &y, comp).unwrap().value();
            let b = ncd(&x, &y, comp).unwrap().value();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ncd_rejects_empty_sections() {
        let x = sec(1, 16);
        let empty = CodeSection::from_raw(Vec::new(), "empty");
        assert!(matches!(ncd(&x, &empty, CompressorId::default()), Err(FitnessError::EmptySection(_))));
    }

    #[test]
    fn fitness_floor_for_compile_failures() {
        let baseline = sec(1, 4096);
        let (score, digest) = fitness_against_baseline(
            || Ok(CompiledArtifact::CompileFailed),
            &baseline,
            ExtractionMode::WholeFile,
            CompressorId::Zstd { level: 3 },
        )
        .unwrap();
        assert_eq!(score, COMPILE_FAILURE_FITNESS);
        assert!(digest.is_none());
    }

    #[test]
    fn fitness_of_baseline_against_itself_is_small() {
        let baseline_bytes = random_bytes(5, 32 << 10);
        let baseline = extract_code_section(&baseline_bytes, ExtractionMode::WholeFile).unwrap();
        let (score, digest) = fitness_against_baseline(
            || Ok(CompiledArtifact::Binary(baseline_bytes.clone())),
            &baseline,
            ExtractionMode::WholeFile,
            CompressorId::default(),
        )
        .unwrap();
        assert!(score <= 0.05, "{score}");
        assert!(digest.is_some());
    }

    #[test]
    fn fitness_of_unrelated_binary_is_high() {
        let baseline = sec(20, 64 << 10);
        let other = random_bytes(21, 64 << 10);
        let (score, _) = fitness_against_baseline(
            || Ok(CompiledArtifact::Binary(other.clone())),
            &baseline,
            ExtractionMode::WholeFile,
            CompressorId::default(),
        )
        .unwrap();
        assert!(score >= 0.9, "{score}");
    }

    #[test]
    fn extraction_failure_after_successful_compile_is_infrastructure() {
        let baseline = sec(1, 64);
        let err = fitness_against_baseline(
            || Ok(CompiledArtifact::Binary(b"not an elf".to_vec())),
            &baseline,
            ExtractionMode::ElfText,
            CompressorId::default(),
        )
        .unwrap_err();
        assert!(matches!(err, FitnessError::Infrastructure(_)));
    }
}
