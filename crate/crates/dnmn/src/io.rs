//! Dataset and model file formats, plus the run manifest written alongside
//! produced models.
//!
//! All formats are line-oriented text. Weights and probabilities are written
//! with the shortest decimal representation that round-trips, so load∘save is
//! the identity on canonical models.
//!
//! Dataset: one instance per line, comma-separated non-negative integers. An
//! optional schema file holds one line of comma-separated arities; without it
//! the arity of each column is inferred as max value + 1, with a minimum of 2.
//!
//! Markov network:
//! ```text
//! MN <n>
//! <arity>,<arity>,...
//! <weight> <var>=<val>[,<var>=<val>...]
//! ```
//!
//! Dependency network: the same two header lines with a `DN` tag, then one
//! parenthesized term per variable, in variable order:
//! `(split <var>=<val> <true-subtree> <false-subtree>)`, `(leaf p0 p1 ...)`,
//! or `(lr bias <b> <var>:<w> ...)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cpd::{Cpd, DependencyNetwork, LrCpd, TreeCpd, TreeNode};
use crate::error::{Error, Result};
use crate::model::{
    canonicalize_feature, Assignment, Canonical, Distribution, MarkovNetwork, Schema, VariableTest,
    WeightedFeature,
};

/// A list of complete assignments sharing one schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    rows: Vec<Assignment>,
}

impl Dataset {
    pub fn new(schema: Schema, rows: Vec<Assignment>) -> Result<Self> {
        for row in &rows {
            Assignment::new(row.values().to_vec(), &schema)?;
        }
        Ok(Dataset { schema, rows })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[Assignment] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the full contents through a temp file in the same directory, so a
/// failed run never leaves a partial output file behind.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    std::fs::write(&tmp, contents).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(|source| {
        let _ = std::fs::remove_file(&tmp);
        io_err(source)
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_arity_line(path: &Path, line_no: usize, line: &str) -> Result<Schema> {
    let arities: Vec<usize> = line
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| parse_err(path, line_no, format!("bad arity token '{}'", tok.trim())))
        })
        .collect::<Result<_>>()?;
    Schema::new(arities).map_err(|e| parse_err(path, line_no, e.to_string()))
}

/// Loads a dataset, taking the schema from `schema_path` when given and
/// inferring it from the data otherwise.
pub fn load_dataset(path: &Path, schema_path: Option<&Path>) -> Result<Dataset> {
    let text = read_to_string(path)?;
    let mut raw: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<usize> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<usize>().map_err(|_| {
                    parse_err(path, line_no, format!("bad value token '{}'", tok.trim()))
                })
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("row has {} values, expected {w}", values.len()),
                ));
            }
            _ => {}
        }
        raw.push((line_no, values));
    }

    let schema = match schema_path {
        Some(sp) => {
            let stext = read_to_string(sp)?;
            let first = stext
                .lines()
                .find(|l| !l.trim().is_empty())
                .ok_or_else(|| parse_err(sp, 1, "empty schema file"))?;
            parse_arity_line(sp, 1, first)?
        }
        None => {
            let width =
                width.ok_or_else(|| parse_err(path, 1, "empty dataset and no schema file"))?;
            let mut arities = vec![2usize; width];
            for (_, values) in &raw {
                for (i, &v) in values.iter().enumerate() {
                    arities[i] = arities[i].max(v + 1);
                }
            }
            Schema::new(arities).expect("inferred arities are >= 2")
        }
    };

    let mut rows = Vec::with_capacity(raw.len());
    for (line_no, values) in raw {
        let row = Assignment::new(values, &schema)
            .map_err(|e| parse_err(path, line_no, e.to_string()))?;
        rows.push(row);
    }
    Ok(Dataset { schema, rows })
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = String::new();
    for row in data.rows() {
        let line: Vec<String> = row.values().iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(",")).unwrap();
    }
    write_atomic(path, &out)
}

fn format_schema(schema: &Schema) -> String {
    schema
        .arities()
        .iter()
        .map(|a| a.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn format_mn(m: &MarkovNetwork) -> String {
    let mut out = String::new();
    writeln!(out, "MN {}", m.schema().len()).unwrap();
    writeln!(out, "{}", format_schema(m.schema())).unwrap();
    for wf in m.features() {
        let tests: Vec<String> = wf
            .feature
            .tests()
            .iter()
            .map(|t| format!("{}={}", t.var, t.val))
            .collect();
        writeln!(out, "{} {}", wf.weight, tests.join(",")).unwrap();
    }
    out
}

pub fn save_mn(path: &Path, m: &MarkovNetwork) -> Result<()> {
    write_atomic(path, &format_mn(m))
}

pub fn load_mn(path: &Path) -> Result<MarkovNetwork> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let n: usize = header
        .strip_prefix("MN ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| parse_err(path, 1, "expected 'MN <n>' header"))?;

    let (_, arity_line) = lines
        .next()
        .ok_or_else(|| parse_err(path, 2, "missing arity line"))?;
    let schema = parse_arity_line(path, 2, arity_line)?;
    if schema.len() != n {
        return Err(parse_err(
            path,
            2,
            format!("{} arities for {n} variables", schema.len()),
        ));
    }

    let mut features = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (wtok, ftok) = line
            .split_once(' ')
            .ok_or_else(|| parse_err(path, line_no, "expected '<weight> <tests>'"))?;
        let weight: f64 = wtok
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad weight '{wtok}'")))?;
        let tests: Vec<VariableTest> = ftok
            .split(',')
            .map(|tok| {
                let (v, val) = tok
                    .split_once('=')
                    .ok_or_else(|| parse_err(path, line_no, format!("bad test '{tok}'")))?;
                Ok(VariableTest::new(
                    v.trim()
                        .parse()
                        .map_err(|_| parse_err(path, line_no, format!("bad variable '{v}'")))?,
                    val.trim()
                        .parse()
                        .map_err(|_| parse_err(path, line_no, format!("bad value '{val}'")))?,
                ))
            })
            .collect::<Result<_>>()?;
        match canonicalize_feature(&schema, &tests)
            .map_err(|e| parse_err(path, line_no, e.to_string()))?
        {
            Canonical::Feature(f) => features.push(WeightedFeature::new(weight, f)),
            other => {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("degenerate feature ({other:?})"),
                ))
            }
        }
    }
    MarkovNetwork::new(schema, features)
}

fn write_tree(out: &mut String, node: &TreeNode) {
    match node {
        TreeNode::Leaf(dist) => {
            out.push_str("(leaf");
            for &p in dist.probs() {
                write!(out, " {p}").unwrap();
            }
            out.push(')');
        }
        TreeNode::Split {
            test,
            on_true,
            on_false,
        } => {
            write!(out, "(split {}={} ", test.var, test.val).unwrap();
            write_tree(out, on_true);
            out.push(' ');
            write_tree(out, on_false);
            out.push(')');
        }
    }
}

pub fn format_dn(dn: &DependencyNetwork) -> String {
    let mut out = String::new();
    writeln!(out, "DN {}", dn.schema().len()).unwrap();
    writeln!(out, "{}", format_schema(dn.schema())).unwrap();
    for cpd in dn.cpds() {
        match cpd {
            Cpd::Tree(t) => {
                write_tree(&mut out, t.root());
                out.push('\n');
            }
            Cpd::Lr(l) => {
                write!(out, "(lr bias {}", l.bias()).unwrap();
                for (&var, &w) in l.weights() {
                    write!(out, " {var}:{w}").unwrap();
                }
                out.push_str(")\n");
            }
        }
    }
    out
}

pub fn save_dn(path: &Path, dn: &DependencyNetwork) -> Result<()> {
    write_atomic(path, &format_dn(dn))
}

/// Tokenizer for the parenthesized CPD terms; tracks line numbers for errors.
struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
}

#[derive(Debug, PartialEq)]
enum Token {
    Open,
    Close,
    Atom(String),
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str, start_line: usize) -> Self {
        Lexer {
            chars: text.chars().peekable(),
            line: start_line,
        }
    }

    fn next_token(&mut self) -> Option<(usize, Token)> {
        while let Some(&c) = self.chars.peek() {
            match c {
                '\n' => {
                    self.line += 1;
                    self.chars.next();
                }
                c if c.is_whitespace() => {
                    self.chars.next();
                }
                '(' => {
                    self.chars.next();
                    return Some((self.line, Token::Open));
                }
                ')' => {
                    self.chars.next();
                    return Some((self.line, Token::Close));
                }
                _ => {
                    let mut atom = String::new();
                    while let Some(&c) = self.chars.peek() {
                        if c.is_whitespace() || c == '(' || c == ')' {
                            break;
                        }
                        atom.push(c);
                        self.chars.next();
                    }
                    return Some((self.line, Token::Atom(atom)));
                }
            }
        }
        None
    }
}

struct DnParser<'a> {
    lexer: Lexer<'a>,
    path: &'a Path,
}

impl<'a> DnParser<'a> {
    fn expect(&mut self, want: &str) -> Result<(usize, Token)> {
        self.lexer.next_token().ok_or_else(|| {
            parse_err(
                self.path,
                self.lexer.line,
                format!("expected {want}, got end of file"),
            )
        })
    }

    fn expect_atom(&mut self, want: &str) -> Result<(usize, String)> {
        match self.expect(want)? {
            (line, Token::Atom(a)) => Ok((line, a)),
            (line, tok) => Err(parse_err(
                self.path,
                line,
                format!("expected {want}, got {tok:?}"),
            )),
        }
    }

    fn parse_f64(&mut self, what: &str) -> Result<f64> {
        let (line, atom) = self.expect_atom(what)?;
        atom.parse()
            .map_err(|_| parse_err(self.path, line, format!("bad {what} '{atom}'")))
    }

    /// Parses one `(split ...)` / `(leaf ...)` tree term after `(` was consumed.
    fn parse_tree_body(&mut self, head_line: usize, head: &str) -> Result<TreeNode> {
        match head {
            "leaf" => {
                let mut probs = Vec::new();
                loop {
                    match self.expect("leaf probability or ')'")? {
                        (_, Token::Close) => break,
                        (line, Token::Atom(a)) => probs.push(a.parse().map_err(|_| {
                            parse_err(self.path, line, format!("bad probability '{a}'"))
                        })?),
                        (line, tok) => {
                            return Err(parse_err(
                                self.path,
                                line,
                                format!("unexpected {tok:?} in leaf"),
                            ))
                        }
                    }
                }
                let dist = Distribution::new(probs)
                    .map_err(|e| parse_err(self.path, head_line, e.to_string()))?;
                Ok(TreeNode::Leaf(dist))
            }
            "split" => {
                let (line, tok) = self.expect_atom("split test '<var>=<val>'")?;
                let (v, val) = tok
                    .split_once('=')
                    .ok_or_else(|| parse_err(self.path, line, format!("bad test '{tok}'")))?;
                let test = VariableTest::new(
                    v.parse()
                        .map_err(|_| parse_err(self.path, line, format!("bad variable '{v}'")))?,
                    val.parse()
                        .map_err(|_| parse_err(self.path, line, format!("bad value '{val}'")))?,
                );
                let on_true = Box::new(self.parse_tree()?);
                let on_false = Box::new(self.parse_tree()?);
                match self.expect("')'")? {
                    (_, Token::Close) => Ok(TreeNode::Split {
                        test,
                        on_true,
                        on_false,
                    }),
                    (line, tok) => Err(parse_err(
                        self.path,
                        line,
                        format!("expected ')', got {tok:?}"),
                    )),
                }
            }
            other => Err(parse_err(
                self.path,
                head_line,
                format!("unknown term '{other}'"),
            )),
        }
    }

    fn parse_tree(&mut self) -> Result<TreeNode> {
        match self.expect("'('")? {
            (_, Token::Open) => {}
            (line, tok) => {
                return Err(parse_err(
                    self.path,
                    line,
                    format!("expected '(', got {tok:?}"),
                ))
            }
        }
        let (head_line, head) = self.expect_atom("term head")?;
        self.parse_tree_body(head_line, &head)
    }

    /// Parses a whole per-variable CPD term.
    fn parse_cpd(&mut self, target: usize, schema: &Schema) -> Result<Cpd> {
        match self.expect("'('")? {
            (_, Token::Open) => {}
            (line, tok) => {
                return Err(parse_err(
                    self.path,
                    line,
                    format!("expected '(', got {tok:?}"),
                ))
            }
        }
        let (head_line, head) = self.expect_atom("term head")?;
        if head == "lr" {
            let (line, kw) = self.expect_atom("'bias'")?;
            if kw != "bias" {
                return Err(parse_err(
                    self.path,
                    line,
                    format!("expected 'bias', got '{kw}'"),
                ));
            }
            let bias = self.parse_f64("bias")?;
            let mut weights = BTreeMap::new();
            loop {
                match self.expect("'<var>:<w>' or ')'")? {
                    (_, Token::Close) => break,
                    (line, Token::Atom(a)) => {
                        let (v, w) = a.split_once(':').ok_or_else(|| {
                            parse_err(self.path, line, format!("bad weight entry '{a}'"))
                        })?;
                        let var: usize = v.parse().map_err(|_| {
                            parse_err(self.path, line, format!("bad variable '{v}'"))
                        })?;
                        let w: f64 = w
                            .parse()
                            .map_err(|_| parse_err(self.path, line, format!("bad weight '{w}'")))?;
                        weights.insert(var, w);
                    }
                    (line, tok) => {
                        return Err(parse_err(
                            self.path,
                            line,
                            format!("unexpected {tok:?} in lr term"),
                        ))
                    }
                }
            }
            let lr = LrCpd::new(target, bias, weights, schema)
                .map_err(|e| parse_err(self.path, head_line, e.to_string()))?;
            Ok(Cpd::Lr(lr))
        } else {
            let root = self.parse_tree_body(head_line, &head)?;
            let tree = TreeCpd::new(target, root, schema)
                .map_err(|e| parse_err(self.path, head_line, e.to_string()))?;
            Ok(Cpd::Tree(tree))
        }
    }
}

pub fn load_dn(path: &Path) -> Result<DependencyNetwork> {
    let text = read_to_string(path)?;
    let mut offset = 0usize;
    let mut line_no = 0usize;
    let mut header = None;
    let mut arity_line = None;
    for line in text.lines() {
        line_no += 1;
        let end = offset + line.len();
        if header.is_none() {
            header = Some((line_no, line.to_string()));
        } else if arity_line.is_none() {
            arity_line = Some((line_no, line.to_string()));
            offset = end + 1;
            break;
        }
        offset = end + 1;
    }
    let (_, header) = header.ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let n: usize = header
        .strip_prefix("DN ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| parse_err(path, 1, "expected 'DN <n>' header"))?;
    let (aline_no, arity_line) =
        arity_line.ok_or_else(|| parse_err(path, 2, "missing arity line"))?;
    let schema = parse_arity_line(path, aline_no, &arity_line)?;
    if schema.len() != n {
        return Err(parse_err(
            path,
            aline_no,
            format!("{} arities for {n} variables", schema.len()),
        ));
    }

    let rest = &text[offset.min(text.len())..];
    let mut parser = DnParser {
        lexer: Lexer::new(rest, aline_no + 1),
        path,
    };
    let mut cpds = Vec::with_capacity(n);
    for target in 0..n {
        cpds.push(parser.parse_cpd(target, &schema)?);
    }
    if let Some((line, tok)) = parser.lexer.next_token() {
        return Err(parse_err(
            path,
            line,
            format!("trailing content {tok:?} after {n} CPDs"),
        ));
    }
    DependencyNetwork::new(schema, cpds)
}

/// Record of one CLI invocation, written next to every produced model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<String>,
    pub hyperparameters: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub duration_seconds: f64,
    pub output: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            inputs: Vec::new(),
            hyperparameters: BTreeMap::new(),
            seed: None,
            duration_seconds: 0.0,
            output: None,
        }
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.display().to_string());
        self
    }

    pub fn param(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.hyperparameters
            .insert(key.to_string(), value.to_string());
        self
    }

    pub fn finish(&mut self, elapsed: Duration) {
        self.duration_seconds = elapsed.as_secs_f64();
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }

    /// Writes `<model>.manifest.json` next to a produced model file.
    pub fn save_alongside(&self, model_path: &Path) -> Result<()> {
        let mut p = model_path.as_os_str().to_owned();
        p.push(".manifest.json");
        write_atomic(&PathBuf::from(p), &(self.to_json() + "\n"))
    }
}
