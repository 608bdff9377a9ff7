//! The compiler optimization-flag search space: flag catalogs, chromosome
//! encoding, and the constraint rules that keep a chromosome compilable.
//!
//! A catalog is data, not code: one text file per compiler family/version
//! declares base levels, flags, and constraint rules (see [`Catalog::parse`]).
//! Supporting a new compiler version means editing a catalog file.

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlagspaceError {
    #[error("catalog parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("flag id {id} out of range for chromosome with {gene_count} genes (catalog mismatch)")]
    IdOutOfRange { id: usize, gene_count: usize },
    #[error("base level index {index} out of range ({count} base levels)")]
    BaseLevelOutOfRange { index: usize, count: usize },
    #[error("unsatisfiable constraints: {0}")]
    Unsatisfiable(String),
    #[error("invalid flag descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("invalid chromosome encoding: {0}")]
    InvalidEncoding(String),
}

/// One tunable boolean flag in the catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlagDescriptor {
    /// Position in the catalog; contiguous 0..N-1.
    pub id: usize,
    /// Token passed on the command line when the gene is ON.
    pub name: String,
    /// Token emitted when the gene is OFF; `None` means omit.
    pub negative_form: Option<String>,
}

/// The full search space: base optimization levels plus boolean flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlagSpace {
    base_levels: Vec<String>,
    flags: Vec<FlagDescriptor>,
    catalog_digest: [u8; 32],
}

impl FlagSpace {
    fn validate(base_levels: &[String], flags: &[FlagDescriptor]) -> Result<(), FlagspaceError> {
        if base_levels.is_empty() {
            return Err(FlagspaceError::InvalidDescriptor(
                "at least one base level is required".into(),
            ));
        }
        for (i, f) in flags.iter().enumerate() {
            if f.id != i {
                return Err(FlagspaceError::InvalidDescriptor(format!(
                    "flag ids must be contiguous: expected {i}, got {} for {}",
                    f.id, f.name
                )));
            }
            if f.name.is_empty() || f.name.chars().any(char::is_whitespace) {
                return Err(FlagspaceError::InvalidDescriptor(format!(
                    "flag name {:?} is empty or contains whitespace",
                    f.name
                )));
            }
        }
        Ok(())
    }

    pub fn base_levels(&self) -> &[String] {
        &self.base_levels
    }

    pub fn flags(&self) -> &[FlagDescriptor] {
        &self.flags
    }

    pub fn gene_count(&self) -> usize {
        self.flags.len()
    }

    pub fn catalog_digest(&self) -> [u8; 32] {
        self.catalog_digest
    }

    pub fn flag_by_name(&self, name: &str) -> Option<&FlagDescriptor> {
        self.flags.iter().find(|f| f.name == name)
    }
}

/// One optimization configuration: a base level plus one bit per flag.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Chromosome {
    pub base_level: usize,
    pub genes: Vec<bool>,
}

impl Chromosome {
    pub fn new(base_level: usize, genes: Vec<bool>) -> Self {
        Self { base_level, genes }
    }

    pub fn all_off(base_level: usize, gene_count: usize) -> Self {
        Self { base_level, genes: vec![false; gene_count] }
    }

    /// Gene bits packed little-endian (bit i at byte i/8, bit i%8).
    pub fn packed_genes(&self) -> Vec<u8> {
        let mut bytes = vec![0u8; self.genes.len().div_ceil(8)];
        for (i, &g) in self.genes.iter().enumerate() {
            if g {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        bytes
    }

    /// Hex encoding of the packed gene bits; `-` for a zero-flag catalog.
    pub fn genes_hex(&self) -> String {
        if self.genes.is_empty() {
            "-".to_string()
        } else {
            hex::encode(self.packed_genes())
        }
    }

    pub fn from_hex(base_level: usize, genes_hex: &str, gene_count: usize) -> Result<Self, FlagspaceError> {
        if gene_count == 0 {
            if genes_hex != "-" {
                return Err(FlagspaceError::InvalidEncoding(format!(
                    "expected '-' for zero-gene chromosome, got {genes_hex:?}"
                )));
            }
            return Ok(Self { base_level, genes: Vec::new() });
        }
        let bytes = hex::decode(genes_hex)
            .map_err(|e| FlagspaceError::InvalidEncoding(e.to_string()))?;
        if bytes.len() != gene_count.div_ceil(8) {
            return Err(FlagspaceError::InvalidEncoding(format!(
                "expected {} packed bytes for {gene_count} genes, got {}",
                gene_count.div_ceil(8),
                bytes.len()
            )));
        }
        let mut genes = Vec::with_capacity(gene_count);
        for i in 0..gene_count {
            genes.push(bytes[i / 8] & (1 << (i % 8)) != 0);
        }
        // reject set bits beyond the gene count so encodings stay canonical
        for i in gene_count..bytes.len() * 8 {
            if bytes[i / 8] & (1 << (i % 8)) != 0 {
                return Err(FlagspaceError::InvalidEncoding(format!(
                    "padding bit {i} set beyond gene count {gene_count}"
                )));
            }
        }
        Ok(Self { base_level, genes })
    }

    /// Content digest used as the evaluation cache key and workdir name.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.base_level as u64).to_le_bytes());
        h.update(self.packed_genes());
        h.finalize().into()
    }

    pub fn short_digest(&self) -> String {
        hex::encode(&self.digest()[..8])
    }
}

/// Antecedent ON requires consequent ON.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Implication {
    pub antecedent: usize,
    pub consequent: usize,
    pub advisory: bool,
}

/// Both flags ON is invalid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conflict {
    pub a: usize,
    pub b: usize,
    pub advisory: bool,
}

/// A signed flag literal inside a [`Formula`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Literal {
    pub flag: usize,
    /// `true`: the literal matches when the flag is ON; `false`: when OFF.
    pub positive: bool,
}

/// A general constraint: the listed combination of flag states is forbidden.
/// The formula is violated exactly when every positive literal's flag is ON
/// and every negative literal's flag is OFF.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formula {
    pub literals: Vec<Literal>,
    pub advisory: bool,
}

/// Implication and conflict rules plus general formulas; the validity
/// predicate for chromosomes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConstraintSet {
    pub implications: Vec<Implication>,
    pub conflicts: Vec<Conflict>,
    pub formulas: Vec<Formula>,
}

impl ConstraintSet {
    pub fn is_empty(&self) -> bool {
        self.implications.is_empty() && self.conflicts.is_empty() && self.formulas.is_empty()
    }

    pub fn rule_count(&self) -> usize {
        self.implications.len() + self.conflicts.len() + self.formulas.len()
    }

    fn max_flag_id(&self) -> Option<usize> {
        let imp = self.implications.iter().flat_map(|i| [i.antecedent, i.consequent]);
        let con = self.conflicts.iter().flat_map(|c| [c.a, c.b]);
        let form = self.formulas.iter().flat_map(|f| f.literals.iter().map(|l| l.flag));
        imp.chain(con).chain(form).max()
    }

    fn check_ids(&self, gene_count: usize) -> Result<(), FlagspaceError> {
        if let Some(id) = self.max_flag_id() {
            if id >= gene_count {
                return Err(FlagspaceError::IdOutOfRange { id, gene_count });
            }
        }
        for c in &self.conflicts {
            if c.a == c.b {
                return Err(FlagspaceError::InvalidDescriptor(format!(
                    "conflict pair ({},{}) references the same flag",
                    c.a, c.b
                )));
            }
        }
        Ok(())
    }
}

/// A single violated rule, reported by [`verify`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Implication { index: usize, antecedent: usize, consequent: usize },
    Conflict { index: usize, a: usize, b: usize },
    Formula { index: usize },
}

impl Violation {
    pub fn describe(&self, space: &FlagSpace) -> String {
        let name = |id: usize| {
            space
                .flags()
                .get(id)
                .map(|f| f.name.clone())
                .unwrap_or_else(|| format!("#{id}"))
        };
        match self {
            Violation::Implication { antecedent, consequent, .. } => {
                format!("{} requires {}", name(*antecedent), name(*consequent))
            }
            Violation::Conflict { a, b, .. } => {
                format!("{} conflicts with {}", name(*a), name(*b))
            }
            Violation::Formula { index } => format!("forbidden combination (clause {index})"),
        }
    }
}

fn formula_violated(f: &Formula, genes: &[bool]) -> bool {
    !f.literals.is_empty()
        && f.literals.iter().all(|l| genes[l.flag] == l.positive)
}

/// Returns every violated rule; an empty list means the chromosome is valid.
/// Advisory rules are skipped. Pure function.
pub fn verify(
    chromosome: &Chromosome,
    constraints: &ConstraintSet,
) -> Result<Vec<Violation>, FlagspaceError> {
    constraints.check_ids(chromosome.genes.len())?;
    let g = &chromosome.genes;
    let mut out = Vec::new();
    for (index, imp) in constraints.implications.iter().enumerate() {
        if !imp.advisory && g[imp.antecedent] && !g[imp.consequent] {
            out.push(Violation::Implication {
                index,
                antecedent: imp.antecedent,
                consequent: imp.consequent,
            });
        }
    }
    for (index, c) in constraints.conflicts.iter().enumerate() {
        if !c.advisory && g[c.a] && g[c.b] {
            out.push(Violation::Conflict { index, a: c.a, b: c.b });
        }
    }
    for (index, f) in constraints.formulas.iter().enumerate() {
        if !f.advisory && formula_violated(f, g) {
            out.push(Violation::Formula { index });
        }
    }
    Ok(out)
}

/// Deterministically repairs a chromosome until it verifies clean.
///
/// Rules are applied in catalog order (implications, then conflicts, then
/// formulas), repeated to fixpoint. Every fix turns a flag OFF: the
/// antecedent for an implication, the higher-id flag for a conflict, and
/// the highest-id ON positive literal for a formula. A violated formula
/// with no positive literal cannot be fixed this way and is reported as
/// unsatisfiable.
pub fn repair(
    chromosome: &Chromosome,
    constraints: &ConstraintSet,
) -> Result<Chromosome, FlagspaceError> {
    constraints.check_ids(chromosome.genes.len())?;
    let mut c = chromosome.clone();
    loop {
        let mut changed = false;
        for imp in &constraints.implications {
            if !imp.advisory && c.genes[imp.antecedent] && !c.genes[imp.consequent] {
                c.genes[imp.antecedent] = false;
                changed = true;
            }
        }
        for conf in &constraints.conflicts {
            if !conf.advisory && c.genes[conf.a] && c.genes[conf.b] {
                c.genes[conf.a.max(conf.b)] = false;
                changed = true;
            }
        }
        for (index, f) in constraints.formulas.iter().enumerate() {
            if f.advisory || !formula_violated(f, &c.genes) {
                continue;
            }
            let victim = f
                .literals
                .iter()
                .filter(|l| l.positive)
                .map(|l| l.flag)
                .max();
            match victim {
                Some(flag) => {
                    c.genes[flag] = false;
                    changed = true;
                }
                None => {
                    return Err(FlagspaceError::Unsatisfiable(format!(
                        "clause {index} has only negative literals and is violated; \
                         it cannot be satisfied by turning flags off"
                    )));
                }
            }
        }
        if !changed {
            return Ok(c);
        }
    }
}

/// Renders a chromosome as an ordered compiler-argument token list:
/// the base-level token, then per flag in id order the name when ON or
/// the negative form (if any) when OFF.
pub fn decode(chromosome: &Chromosome, space: &FlagSpace) -> Result<Vec<String>, FlagspaceError> {
    if chromosome.base_level >= space.base_levels().len() {
        return Err(FlagspaceError::BaseLevelOutOfRange {
            index: chromosome.base_level,
            count: space.base_levels().len(),
        });
    }
    if chromosome.genes.len() != space.gene_count() {
        return Err(FlagspaceError::IdOutOfRange {
            id: chromosome.genes.len(),
            gene_count: space.gene_count(),
        });
    }
    let mut out = Vec::with_capacity(1 + chromosome.genes.len());
    out.push(space.base_levels()[chromosome.base_level].clone());
    for (flag, &on) in space.flags().iter().zip(&chromosome.genes) {
        if on {
            out.push(flag.name.clone());
        } else if let Some(neg) = &flag.negative_form {
            out.push(neg.clone());
        }
    }
    Ok(out)
}

/// Uniformly random base level and genes, repaired to validity.
pub fn random_chromosome<R: rand::Rng>(
    space: &FlagSpace,
    constraints: &ConstraintSet,
    rng: &mut R,
) -> Result<Chromosome, FlagspaceError> {
    let base_level = rng.gen_range(0..space.base_levels().len());
    let genes = (0..space.gene_count()).map(|_| rng.gen_bool(0.5)).collect();
    repair(&Chromosome::new(base_level, genes), constraints)
}

/// A parsed catalog: the flag space plus its constraint rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    pub space: FlagSpace,
    pub constraints: ConstraintSet,
}

impl Catalog {
    pub fn new(
        base_levels: Vec<String>,
        flags: Vec<FlagDescriptor>,
        constraints: ConstraintSet,
    ) -> Result<Self, FlagspaceError> {
        FlagSpace::validate(&base_levels, &flags)?;
        constraints.check_ids(flags.len())?;
        let mut space = FlagSpace { base_levels, flags, catalog_digest: [0; 32] };
        let text = serialize_catalog(&space, &constraints);
        space.catalog_digest = catalog_digest(&text);
        Ok(Self { space, constraints })
    }

    /// Parses the line-oriented catalog format:
    ///
    /// ```text
    /// level <token>                  # base levels in order
    /// flag <name> [negative_form]    # flags in id order
    /// requires <name> <name>         # antecedent requires consequent
    /// conflicts <name> <name>        # both ON is invalid
    /// clause <+name|-name>...        # forbidden combination
    /// advisory <rule...>             # rule checked nowhere, kept as data
    /// ```
    ///
    /// `#` starts a comment. The catalog digest is the SHA-256 of the file
    /// with comments and trailing whitespace stripped and blank lines
    /// removed, lines joined by `\n`.
    pub fn parse(text: &str) -> Result<Self, FlagspaceError> {
        let mut base_levels: Vec<String> = Vec::new();
        let mut flags: Vec<FlagDescriptor> = Vec::new();
        let mut constraints = ConstraintSet::default();

        let err = |line: usize, msg: String| FlagspaceError::Parse { line, msg };
        let find = |flags: &[FlagDescriptor], name: &str, line: usize| {
            flags
                .iter()
                .find(|f| f.name == name)
                .map(|f| f.id)
                .ok_or_else(|| err(line, format!("unknown flag {name:?}")))
        };

        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let stripped = strip_comment(raw).trim_end();
            if stripped.trim().is_empty() {
                continue;
            }
            let mut tokens = stripped.split_whitespace();
            let mut keyword = tokens.next().unwrap();
            let advisory = keyword == "advisory";
            if advisory {
                keyword = tokens
                    .next()
                    .ok_or_else(|| err(line, "advisory requires a rule".into()))?;
            }
            let rest: Vec<&str> = tokens.collect();
            match keyword {
                "level" => {
                    if advisory || rest.len() != 1 {
                        return Err(err(line, "expected: level <token>".into()));
                    }
                    base_levels.push(rest[0].to_string());
                }
                "flag" => {
                    if advisory || rest.is_empty() || rest.len() > 2 {
                        return Err(err(line, "expected: flag <name> [negative_form]".into()));
                    }
                    flags.push(FlagDescriptor {
                        id: flags.len(),
                        name: rest[0].to_string(),
                        negative_form: rest.get(1).map(|s| s.to_string()),
                    });
                }
                "requires" => {
                    if rest.len() != 2 {
                        return Err(err(line, "expected: requires <name> <name>".into()));
                    }
                    constraints.implications.push(Implication {
                        antecedent: find(&flags, rest[0], line)?,
                        consequent: find(&flags, rest[1], line)?,
                        advisory,
                    });
                }
                "conflicts" => {
                    if rest.len() != 2 {
                        return Err(err(line, "expected: conflicts <name> <name>".into()));
                    }
                    let a = find(&flags, rest[0], line)?;
                    let b = find(&flags, rest[1], line)?;
                    if a == b {
                        return Err(err(line, format!("conflict pair ({},{}) is degenerate", rest[0], rest[1])));
                    }
                    constraints.conflicts.push(Conflict { a, b, advisory });
                }
                "clause" => {
                    if rest.is_empty() {
                        return Err(err(line, "clause needs at least one literal".into()));
                    }
                    let mut literals = Vec::with_capacity(rest.len());
                    for tok in &rest {
                        let (positive, name) = match tok.as_bytes().first() {
                            Some(b'+') => (true, &tok[1..]),
                            Some(b'-') => (false, &tok[1..]),
                            _ => return Err(err(line, format!("literal {tok:?} must start with + or -"))),
                        };
                        literals.push(Literal { flag: find(&flags, name, line)?, positive });
                    }
                    constraints.formulas.push(Formula { literals, advisory });
                }
                other => return Err(err(line, format!("unknown directive {other:?}"))),
            }
        }

        FlagSpace::validate(&base_levels, &flags)?;
        let mut space = FlagSpace { base_levels, flags, catalog_digest: [0; 32] };
        space.catalog_digest = catalog_digest(text);
        Ok(Self { space, constraints })
    }

    pub fn serialize(&self) -> String {
        serialize_catalog(&self.space, &self.constraints)
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

/// Canonical stripped form: comments and trailing whitespace removed,
/// blank lines dropped, lines joined by `\n`.
pub fn canonical_catalog_text(text: &str) -> String {
    text.lines()
        .map(|l| strip_comment(l).trim_end())
        .filter(|l| !l.trim().is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

/// SHA-256 of the canonical stripped catalog text.
pub fn catalog_digest(text: &str) -> [u8; 32] {
    Sha256::digest(canonical_catalog_text(text).as_bytes()).into()
}

fn serialize_catalog(space: &FlagSpace, constraints: &ConstraintSet) -> String {
    let name = |id: usize| space.flags[id].name.as_str();
    let mut out = String::new();
    for level in &space.base_levels {
        out.push_str(&format!("level {level}\n"));
    }
    for f in &space.flags {
        match &f.negative_form {
            Some(neg) => out.push_str(&format!("flag {} {}\n", f.name, neg)),
            None => out.push_str(&format!("flag {}\n", f.name)),
        }
    }
    for i in &constraints.implications {
        let prefix = if i.advisory { "advisory " } else { "" };
        out.push_str(&format!("{prefix}requires {} {}\n", name(i.antecedent), name(i.consequent)));
    }
    for c in &constraints.conflicts {
        let prefix = if c.advisory { "advisory " } else { "" };
        out.push_str(&format!("{prefix}conflicts {} {}\n", name(c.a), name(c.b)));
    }
    for f in &constraints.formulas {
        let prefix = if f.advisory { "advisory " } else { "" };
        let lits: Vec<String> = f
            .literals
            .iter()
            .map(|l| format!("{}{}", if l.positive { "+" } else { "-" }, name(l.flag)))
            .collect();
        out.push_str(&format!("{prefix}clause {}\n", lits.join(" ")));
    }
    out
}
