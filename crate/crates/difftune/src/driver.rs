//! Turns a chromosome into a compiled binary: renders compiler command
//! lines from a declarative build manifest and executes them with a
//! timeout, plus a hermetic synthetic backend for testing.
//!
//! The manifest replaces build-system interception: it declares the same
//! three facts a makefile analysis would extract (sources, configuration,
//! initial flags) as explicit input. One linked output per compile; a
//! driver script can stand in for complex projects.

use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::elf;
use crate::fitness::EvalStatus;
use crate::flagspace::{decode, Chromosome, FlagSpace, FlagspaceError};

/// Compiler name selecting the in-process synthetic backend instead of a
/// subprocess. Hermetic sessions use it for speed and bit-reproducible
/// logs (its compile durations are recorded as zero).
pub const BUILTIN_MOCK: &str = "builtin:mock";

/// Flag token that makes the mock backend exit with a compile error.
pub const POISON_FAIL: &str = "__fail__";
/// Flag token that makes the mock backend sleep for 3600 s.
pub const POISON_HANG: &str = "__hang__";

pub const STDERR_EXCERPT_LIMIT: usize = 4096;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("invalid build manifest: {0}")]
    Manifest(String),
    #[error("chromosome decode failed: {0}")]
    Decode(#[from] FlagspaceError),
    #[error("infrastructure failure: {0}")]
    Infrastructure(String),
}

/// Declarative description of how to build the target once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildManifest {
    /// Compiler executable (path or name resolved via PATH), or
    /// [`BUILTIN_MOCK`].
    pub compiler_command: String,
    /// Tokens always passed before the optimization flags.
    pub fixed_args: Vec<String>,
    /// Source files (or a single driver script).
    pub sources: Vec<PathBuf>,
    /// Output file name; `{digest}` expands to the chromosome digest.
    /// Without the placeholder the output is placed in a per-chromosome
    /// subdirectory so concurrent compiles cannot collide.
    pub output_template: String,
    pub timeout: Duration,
    pub workdir: PathBuf,
    /// Environment variable names passed through to the compiler.
    pub env_allowlist: Vec<String>,
}

impl BuildManifest {
    pub fn validate(&self) -> Result<(), DriverError> {
        if self.sources.is_empty() {
            return Err(DriverError::Manifest("sources must be non-empty".into()));
        }
        if self.timeout.is_zero() {
            return Err(DriverError::Manifest("timeout must be positive".into()));
        }
        if self.output_template.is_empty() {
            return Err(DriverError::Manifest("output template must be non-empty".into()));
        }
        Ok(())
    }

    /// Content hash over every manifest field; part of the session
    /// header, so resuming with an edited manifest is refused.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut field = |tag: &str, value: &str| {
            h.update(tag.as_bytes());
            h.update([0]);
            h.update(value.as_bytes());
            h.update([0]);
        };
        field("compiler", &self.compiler_command);
        field("fixed_args", &self.fixed_args.join("\u{1f}"));
        let sources: Vec<String> = self.sources.iter().map(|p| p.display().to_string()).collect();
        field("sources", &sources.join("\u{1f}"));
        field("output", &self.output_template);
        field("timeout_ns", &self.timeout.as_nanos().to_string());
        field("workdir", &self.workdir.display().to_string());
        field("env", &self.env_allowlist.join("\u{1f}"));
        h.finalize().into()
    }

    /// Where this chromosome's binary lands.
    pub fn output_path(&self, chromosome: &Chromosome) -> PathBuf {
        let digest = chromosome.short_digest();
        if self.output_template.contains("{digest}") {
            self.workdir.join(self.output_template.replace("{digest}", &digest))
        } else {
            self.workdir.join(digest).join(&self.output_template)
        }
    }
}

/// Outcome of one compile attempt.
#[derive(Debug, Clone)]
pub struct CompileResult {
    pub status: EvalStatus,
    /// SHA-256 of the output file; present iff status is ok.
    pub binary_digest: Option<[u8; 32]>,
    /// First 4 KiB of compiler diagnostics.
    pub stderr_excerpt: String,
    pub duration: Duration,
    /// Path of the produced binary; present iff status is ok.
    pub output_path: Option<PathBuf>,
}

/// Renders the full argv: compiler, fixed args, decoded optimization
/// tokens, sources, then the output designation.
pub fn render_command(
    manifest: &BuildManifest,
    chromosome: &Chromosome,
    space: &FlagSpace,
) -> Result<Vec<String>, DriverError> {
    let mut argv = Vec::new();
    argv.push(manifest.compiler_command.clone());
    argv.extend(manifest.fixed_args.iter().cloned());
    argv.extend(decode(chromosome, space)?);
    argv.extend(manifest.sources.iter().map(|p| p.display().to_string()));
    argv.push("-o".to_string());
    argv.push(manifest.output_path(chromosome).display().to_string());
    Ok(argv)
}

/// Compiles one chromosome. Nonzero exit maps to `compile_error`, a blown
/// deadline to `timeout` (the process group is killed); a missing compiler
/// or an exit-0 run that produced no output aborts as infrastructure.
pub fn compile(
    manifest: &BuildManifest,
    chromosome: &Chromosome,
    space: &FlagSpace,
) -> Result<CompileResult, DriverError> {
    manifest.validate()?;
    let argv = render_command(manifest, chromosome, space)?;
    let out_path = manifest.output_path(chromosome);
    if let Some(parent) = out_path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| DriverError::Infrastructure(format!("create {}: {e}", parent.display())))?;
    }
    let _ = fs::remove_file(&out_path);

    if manifest.compiler_command == BUILTIN_MOCK {
        return run_builtin_mock(manifest, &argv[1..], &out_path);
    }
    run_subprocess(manifest, &argv, &out_path)
}

fn finish_ok(out_path: &Path, duration: Duration, stderr_excerpt: String) -> Result<CompileResult, DriverError> {
    let bytes = fs::read(out_path)
        .map_err(|e| DriverError::Infrastructure(format!("read output {}: {e}", out_path.display())))?;
    Ok(CompileResult {
        status: EvalStatus::Ok,
        binary_digest: Some(Sha256::digest(&bytes).into()),
        stderr_excerpt,
        duration,
        output_path: Some(out_path.to_path_buf()),
    })
}

fn run_builtin_mock(
    manifest: &BuildManifest,
    args: &[String],
    out_path: &Path,
) -> Result<CompileResult, DriverError> {
    let inv = synthetic::parse_mock_args(args.iter().cloned())
        .map_err(DriverError::Manifest)?;
    if inv.fail {
        return Ok(CompileResult {
            status: EvalStatus::CompileError,
            binary_digest: None,
            stderr_excerpt: "mock backend: poisoned flag combination".into(),
            duration: Duration::ZERO,
            output_path: None,
        });
    }
    if inv.hang {
        // the in-process backend reports the timeout instead of sleeping
        return Ok(CompileResult {
            status: EvalStatus::Timeout,
            binary_digest: None,
            stderr_excerpt: String::new(),
            duration: manifest.timeout,
            output_path: None,
        });
    }
    let bytes = synthetic::emit_elf(&inv.flags, inv.seed);
    fs::write(out_path, &bytes)
        .map_err(|e| DriverError::Infrastructure(format!("write {}: {e}", out_path.display())))?;
    // durations stay zero so hermetic session logs are bit-reproducible
    Ok(CompileResult {
        status: EvalStatus::Ok,
        binary_digest: Some(Sha256::digest(&bytes).into()),
        stderr_excerpt: String::new(),
        duration: Duration::ZERO,
        output_path: Some(out_path.to_path_buf()),
    })
}

fn run_subprocess(
    manifest: &BuildManifest,
    argv: &[String],
    out_path: &Path,
) -> Result<CompileResult, DriverError> {
    let started = Instant::now();
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .current_dir(&manifest.workdir)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .env_clear();
    for name in &manifest.env_allowlist {
        if let Ok(value) = std::env::var(name) {
            cmd.env(name, value);
        }
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }

    let mut child = cmd.spawn().map_err(|e| {
        DriverError::Infrastructure(format!("cannot execute compiler {:?}: {e}", argv[0]))
    })?;

    let mut stderr_pipe = child.stderr.take().expect("stderr was piped");
    let reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr_pipe.read_to_end(&mut buf);
        buf
    });

    let deadline = started + manifest.timeout;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) => {
                if Instant::now() >= deadline {
                    kill_process_tree(&mut child);
                    let _ = child.wait();
                    break None;
                }
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(DriverError::Infrastructure(format!("wait on compiler: {e}"))),
        }
    };
    let duration = started.elapsed();
    let stderr_bytes = reader.join().unwrap_or_default();
    let mut stderr_excerpt =
        String::from_utf8_lossy(&stderr_bytes[..stderr_bytes.len().min(STDERR_EXCERPT_LIMIT)]).into_owned();

    match status {
        None => Ok(CompileResult {
            status: EvalStatus::Timeout,
            binary_digest: None,
            stderr_excerpt,
            duration,
            output_path: None,
        }),
        Some(st) if st.success() => {
            if !out_path.is_file() {
                return Err(DriverError::Infrastructure(format!(
                    "compiler exited 0 but produced no output at {}",
                    out_path.display()
                )));
            }
            finish_ok(out_path, duration, stderr_excerpt)
        }
        Some(st) => {
            if stderr_excerpt.is_empty() {
                stderr_excerpt = format!("compiler exited with {st}");
            }
            Ok(CompileResult {
                status: EvalStatus::CompileError,
                binary_digest: None,
                stderr_excerpt,
                duration,
                output_path: None,
            })
        }
    }
}

#[cfg(unix)]
fn kill_process_tree(child: &mut std::process::Child) {
    // the child was started in its own process group
    unsafe {
        libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
    }
}

#[cfg(not(unix))]
fn kill_process_tree(child: &mut std::process::Child) {
    let _ = child.kill();
}

/// The hermetic synthetic compile backend: a deterministic function from
/// (flag set, seed) to a small ELF, giving iterative-compilation tests a
/// planted, reproducible fitness landscape without a real compiler.
pub mod synthetic {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Size of the synthetic `.text` payload.
    pub const TEXT_SIZE: usize = 64 * 1024;
    const BLOCK: usize = 64;
    const CLASSES: u64 = 64;

    /// Parsed mock-backend invocation, shared by the `mock-cc` executable
    /// and the in-process [`BUILTIN_MOCK`] path.
    #[derive(Debug, Default, Clone)]
    pub struct MockInvocation {
        pub out: Option<PathBuf>,
        pub seed: u64,
        pub flags: BTreeSet<String>,
        pub fail: bool,
        pub hang: bool,
    }

    /// Accepts `--emit <out>`/`-o <out>`, `--seed <n>`, `--flags <a,b,c>`,
    /// bare flag tokens, and source paths (ignored). Base-level tokens
    /// (`-O0`, `-O2`, `-Os`, ...) do not alter the synthetic program so
    /// the hermetic landscape ranges over gene bits only.
    pub fn parse_mock_args<I: IntoIterator<Item = String>>(args: I) -> Result<MockInvocation, String> {
        let mut inv = MockInvocation::default();
        let mut it = args.into_iter();
        let mut need_value = |it: &mut I::IntoIter, opt: &str| {
            it.next().ok_or_else(|| format!("{opt} requires a value"))
        };
        while let Some(tok) = it.next() {
            match tok.as_str() {
                "--emit" | "-o" => inv.out = Some(PathBuf::from(need_value(&mut it, &tok)?)),
                "--seed" => {
                    inv.seed = need_value(&mut it, "--seed")?
                        .parse()
                        .map_err(|e| format!("--seed: {e}"))?;
                }
                "--flags" => {
                    for f in need_value(&mut it, "--flags")?.split(',').filter(|s| !s.is_empty()) {
                        add_flag(&mut inv, f);
                    }
                }
                POISON_FAIL => inv.fail = true,
                POISON_HANG => inv.hang = true,
                t if is_base_level(t) => {}
                t if t.starts_with('-') => add_flag(&mut inv, t),
                _ => {} // source file; the synthetic backend reads nothing
            }
        }
        Ok(inv)
    }

    fn add_flag(inv: &mut MockInvocation, token: &str) {
        match token {
            POISON_FAIL => inv.fail = true,
            POISON_HANG => inv.hang = true,
            _ => {
                inv.flags.insert(token.to_string());
            }
        }
    }

    fn is_base_level(tok: &str) -> bool {
        tok.strip_prefix("-O")
            .is_some_and(|rest| rest.len() <= 1 && rest.chars().all(|c| c.is_ascii_alphanumeric()))
    }

    fn flag_key(name: &str, seed: u64) -> u64 {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update(seed.to_le_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// The synthetic `.text` bytes: a seeded pseudorandom program, with
    /// one deterministic byte transform applied per enabled flag.
    ///
    /// Each flag hashes to a transform kind (substitution, in-block
    /// shuffle, or run duplication), a residue class of block indices it
    /// acts on, and a key. Flags are applied in canonical (sorted) order
    /// and each transform touches only blocks of its own class, so the
    /// output is independent of how the flag set was written down.
    pub fn emit_text(flags: &BTreeSet<String>, seed: u64) -> Vec<u8> {
        let mut text = vec![0u8; TEXT_SIZE];
        ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut text);
        for name in flags {
            let key = flag_key(name, seed);
            let kind = key % 3;
            let class = (key >> 8) % CLASSES;
            for block in 0..(TEXT_SIZE / BLOCK) as u64 {
                if block % CLASSES != class {
                    continue;
                }
                let chunk = &mut text[(block as usize) * BLOCK..(block as usize + 1) * BLOCK];
                let mut rng = ChaCha8Rng::seed_from_u64(key ^ block.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                match kind {
                    0 => {
                        for b in chunk.iter_mut() {
                            *b ^= rng.gen::<u8>();
                        }
                    }
                    1 => chunk.shuffle(&mut rng),
                    _ => {
                        let k = 4 + (key % 29) as usize;
                        for i in k..BLOCK {
                            chunk[i] = chunk[i % k];
                        }
                    }
                }
            }
        }
        text
    }

    /// The synthetic binary: [`emit_text`] wrapped in a minimal ELF64.
    pub fn emit_elf(flags: &BTreeSet<String>, seed: u64) -> Vec<u8> {
        elf::build_minimal_elf64(&emit_text(flags, seed))
    }
}

#[cfg(test)]
mod tests {
    use super::synthetic::*;
    use super::*;
    use crate::fitness::{extract_code_section, ncd, CompressorId, ExtractionMode};
    use crate::flagspace::{Catalog, ConstraintSet, FlagDescriptor};
    use std::collections::BTreeSet;

    fn catalog() -> Catalog {
        Catalog::new(
            vec!["-O0".into(), "-O2".into()],
            vec![
                FlagDescriptor { id: 0, name: "-funroll-loops".into(), negative_form: None },
                FlagDescriptor { id: 1, name: "-fmock-b".into(), negative_form: None },
            ],
            ConstraintSet::default(),
        )
        .unwrap()
    }

    fn manifest(workdir: &Path) -> BuildManifest {
        BuildManifest {
            compiler_command: "cc".into(),
            fixed_args: vec!["-w".into()],
            sources: vec![PathBuf::from("a.c")],
            output_template: "{digest}.bin".into(),
            timeout: Duration::from_secs(5),
            workdir: workdir.to_path_buf(),
            env_allowlist: vec!["PATH".into()],
        }
    }

    #[test]
    fn render_command_orders_tokens() {
        let cat = catalog();
        let dir = PathBuf::from("/tmp/w");
        let m = manifest(&dir);
        let c = Chromosome::new(1, vec![false, false]);
        let argv = render_command(&m, &c, &cat.space).unwrap();
        let out = m.output_path(&c).display().to_string();
        assert_eq!(argv, vec!["cc", "-w", "-O2", "a.c", "-o", &out]);

        let c2 = Chromosome::new(1, vec![true, false]);
        let argv2 = render_command(&m, &c2, &cat.space).unwrap();
        assert_eq!(argv2[2], "-O2");
        assert_eq!(argv2[3], "-funroll-loops");
        assert_eq!(argv2[4], "a.c");
    }

    #[test]
    fn render_command_with_empty_fixed_args() {
        let cat = catalog();
        let mut m = manifest(Path::new("/tmp/w"));
        m.fixed_args.clear();
        let argv = render_command(&m, &Chromosome::new(0, vec![false, false]), &cat.space).unwrap();
        assert_eq!(argv[1], "-O0");
    }

    #[test]
    fn manifest_hash_tracks_every_field() {
        let base = manifest(Path::new("/w"));
        let mut edited = base.clone();
        edited.fixed_args.push("-g".into());
        assert_ne!(base.hash(), edited.hash());
        let mut edited = base.clone();
        edited.timeout = Duration::from_secs(6);
        assert_ne!(base.hash(), edited.hash());
    }

    #[test]
    fn emit_is_deterministic_and_flag_order_free() {
        let mut a = BTreeSet::new();
        a.insert("-fx".to_string());
        a.insert("-fy".to_string());
        let mut b = BTreeSet::new();
        b.insert("-fy".to_string());
        b.insert("-fx".to_string());
        assert_eq!(emit_text(&a, 7), emit_text(&b, 7));
        assert_eq!(emit_text(&BTreeSet::new(), 7), emit_text(&BTreeSet::new(), 7));
        assert_ne!(emit_text(&BTreeSet::new(), 7), emit_text(&BTreeSet::new(), 8));
    }

    #[test]
    fn emit_flags_move_the_section_away_from_baseline() {
        let baseline = emit_text(&BTreeSet::new(), 3);
        let mut flags = BTreeSet::new();
        for i in 0..8 {
            flags.insert(format!("-fmock-{i:02}"));
        }
        let tuned = emit_text(&flags, 3);
        assert_ne!(baseline, tuned);
        let b = crate::fitness::CodeSection::from_raw(baseline, "b");
        let t = crate::fitness::CodeSection::from_raw(tuned, "t");
        let score = ncd(&t, &b, CompressorId::Zstd { level: 3 }).unwrap().value();
        assert!(score > 0.05, "{score}");
    }

    #[test]
    fn emit_elf_round_trips_through_extraction() {
        let mut flags = BTreeSet::new();
        flags.insert("-fa".to_string());
        let elf_bytes = emit_elf(&flags, 11);
        let section = extract_code_section(&elf_bytes, ExtractionMode::ElfText).unwrap();
        assert_eq!(section.bytes(), emit_text(&flags, 11));
    }

    #[test]
    fn builtin_mock_compile_produces_documented_digest() {
        let dir = tempfile::tempdir().unwrap();
        let cat = catalog();
        let mut m = manifest(dir.path());
        m.compiler_command = BUILTIN_MOCK.into();
        m.fixed_args = vec!["--seed".into(), "9".into()];
        let c = Chromosome::new(0, vec![true, false]);
        let r = compile(&m, &c, &cat.space).unwrap();
        assert_eq!(r.status, EvalStatus::Ok);
        // the digest is an independent function of the enabled flag set
        let mut flags = BTreeSet::new();
        flags.insert("-funroll-loops".to_string());
        let expected: [u8; 32] = sha2::Sha256::digest(emit_elf(&flags, 9)).into();
        assert_eq!(r.binary_digest, Some(expected));
        // identical (manifest, chromosome) pair, identical digest
        let r2 = compile(&m, &c, &cat.space).unwrap();
        assert_eq!(r2.binary_digest, r.binary_digest);
    }

    #[test]
    fn builtin_mock_poison_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cat = Catalog::new(
            vec!["-O0".into()],
            vec![
                FlagDescriptor { id: 0, name: POISON_FAIL.into(), negative_form: None },
                FlagDescriptor { id: 1, name: POISON_HANG.into(), negative_form: None },
            ],
            ConstraintSet::default(),
        )
        .unwrap();
        let mut m = manifest(dir.path());
        m.compiler_command = BUILTIN_MOCK.into();
        let fail = compile(&m, &Chromosome::new(0, vec![true, false]), &cat.space).unwrap();
        assert_eq!(fail.status, EvalStatus::CompileError);
        assert!(!fail.stderr_excerpt.is_empty());
        let hang = compile(&m, &Chromosome::new(0, vec![false, true]), &cat.space).unwrap();
        assert_eq!(hang.status, EvalStatus::Timeout);
    }

    #[test]
    fn missing_compiler_is_infrastructure_error() {
        let dir = tempfile::tempdir().unwrap();
        let cat = catalog();
        let mut m = manifest(dir.path());
        m.compiler_command = "/nonexistent/compiler-xyz".into();
        let err = compile(&m, &Chromosome::new(0, vec![false, false]), &cat.space).unwrap_err();
        assert!(matches!(err, DriverError::Infrastructure(_)));
    }
}
