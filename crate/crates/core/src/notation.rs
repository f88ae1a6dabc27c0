//! Arrow and arrow-and-lag notation.
//!
//! Each nonblank line describes one term of a reticular action model:
//!
//! ```text
//! X -> Y, beta, 0.5          # arrow notation: path, label, optional start
//! X -> Y, 1, beta, 0.5       # arrow-and-lag: path, lag, label, optional start
//! X <-> X, 0, NA, 0          # two-headed term fixed at zero
//! ```
//!
//! A label of `NA` fixes the term at its start value. Terms that share a
//! label share one estimated parameter. Every variable without an explicit
//! lag-0 two-headed self term receives a default standard deviation.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use thiserror::Error;

pub const DEFAULT_PATH_START: f64 = 0.01;
pub const DEFAULT_VARIANCE_START: f64 = 1.0;
const FIXED_MARKER: &str = "NA";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NotationError {
    #[error("line {line}: unknown variable `{name}`")]
    UnknownVariable { line: usize, name: String },
    #[error("line {line}: malformed term near `{token}`: {reason}")]
    Malformed {
        line: usize,
        token: String,
        reason: &'static str,
    },
    #[error("line {line}: lag `{token}` is not a nonnegative integer")]
    InvalidLag { line: usize, token: String },
    #[error("line {line}: start value `{token}` is not a finite number")]
    InvalidStart { line: usize, token: String },
    #[error("line {line}: fixed term (NA) needs a start value")]
    FixedWithoutValue { line: usize },
    #[error("line {line}: second variance term for `{variable}`")]
    DuplicateSelfVariance { line: usize, variable: String },
    #[error("line {line}: duplicate term `{term}`")]
    DuplicateTerm { line: usize, term: String },
    #[error("duplicate variable `{0}` in variable list")]
    DuplicateVariable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Heads {
    One,
    Two,
}

impl Heads {
    pub fn arrow(self) -> &'static str {
        match self {
            Heads::One => "->",
            Heads::Two => "<->",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Param {
    Free(String),
    Fixed,
}

/// One line of a RAM: a path coefficient (one head) or an exogenous
/// (co)variance entry (two heads).
#[derive(Debug, Clone, PartialEq)]
pub struct PathTerm {
    pub from: String,
    pub to: String,
    pub heads: Heads,
    pub lag: usize,
    pub param: Param,
    pub start: f64,
}

impl PathTerm {
    pub fn is_self_variance(&self) -> bool {
        self.heads == Heads::Two && self.from == self.to && self.lag == 0
    }

    pub fn is_fixed(&self) -> bool {
        self.param == Param::Fixed
    }

    pub fn label(&self) -> Option<&str> {
        match &self.param {
            Param::Free(l) => Some(l),
            Param::Fixed => None,
        }
    }

    fn key(&self) -> (Heads, &str, &str, usize) {
        (self.heads, &self.from, &self.to, self.lag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RamKind {
    /// Arrow notation, every lag is zero.
    Sem,
    /// Arrow-and-lag notation.
    Dsem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub label: String,
    pub start: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RamModel {
    pub kind: RamKind,
    pub terms: Vec<PathTerm>,
    pub variables: Vec<String>,
    pub params: Vec<Parameter>,
    pub max_lag: usize,
    /// Legal but unusual constructs, e.g. lagged covariances.
    pub warnings: Vec<String>,
    term_param: Vec<Option<usize>>,
    term_vars: Vec<(usize, usize)>,
}

pub fn parse_sem(text: &str, variables: &[String]) -> Result<RamModel, NotationError> {
    parse(text, variables, RamKind::Sem)
}

pub fn parse_dsem(text: &str, variables: &[String]) -> Result<RamModel, NotationError> {
    parse(text, variables, RamKind::Dsem)
}

fn parse(text: &str, variables: &[String], kind: RamKind) -> Result<RamModel, NotationError> {
    let mut seen = HashSet::new();
    for v in variables {
        if !seen.insert(v.as_str()) {
            return Err(NotationError::DuplicateVariable(v.clone()));
        }
    }
    let mut terms: Vec<PathTerm> = Vec::new();
    let mut keys: HashSet<(Heads, String, String, usize)> = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let term = parse_line(line, line_no, variables, kind)?;
        let (heads, from, to, lag) = term.key();
        let key = (heads, from.to_string(), to.to_string(), lag);
        if keys.contains(&key) {
            if term.is_self_variance() {
                return Err(NotationError::DuplicateSelfVariance {
                    line: line_no,
                    variable: term.from,
                });
            }
            return Err(NotationError::DuplicateTerm {
                line: line_no,
                term: format!("{} {} {}", term.from, term.heads.arrow(), term.to),
            });
        }
        keys.insert(key);
        terms.push(term);
    }
    let mut ram = RamModel::from_terms(kind, terms, variables.to_vec());
    ram.augment_defaults();
    Ok(ram)
}

fn parse_line(line: &str, line_no: usize, variables: &[String], kind: RamKind) -> Result<PathTerm, NotationError> {
    let mut fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() > 1 && fields.last() == Some(&"") {
        fields.pop();
    }
    let malformed = |token: &str, reason| NotationError::Malformed {
        line: line_no,
        token: token.to_string(),
        reason,
    };
    let (min, max) = match kind {
        RamKind::Sem => (2, 3),
        RamKind::Dsem => (3, 4),
    };
    if fields.len() < min || fields.len() > max {
        return Err(malformed(line, "wrong number of comma-separated fields"));
    }
    if let Some(empty) = fields.iter().find(|f| f.is_empty()) {
        return Err(malformed(empty, "empty field"));
    }

    let spec = fields[0];
    let (heads, lhs, rhs) = if let Some((l, r)) = spec.split_once("<->") {
        (Heads::Two, l.trim(), r.trim())
    } else if let Some((l, r)) = spec.split_once("->") {
        (Heads::One, l.trim(), r.trim())
    } else {
        return Err(malformed(spec, "expected `->` or `<->`"));
    };
    for name in [lhs, rhs] {
        if name.is_empty() || name.contains(char::is_whitespace) || name.contains("->") || name.contains('<') {
            return Err(malformed(name, "invalid variable name"));
        }
        if !variables.iter().any(|v| v == name) {
            return Err(NotationError::UnknownVariable {
                line: line_no,
                name: name.to_string(),
            });
        }
    }

    let mut rest = &fields[1..];
    let lag = match kind {
        RamKind::Sem => 0,
        RamKind::Dsem => {
            let tok = rest[0];
            rest = &rest[1..];
            tok.parse::<usize>().map_err(|_| NotationError::InvalidLag {
                line: line_no,
                token: tok.to_string(),
            })?
        }
    };
    let label = rest[0];
    if label.contains(char::is_whitespace) {
        return Err(malformed(label, "parameter labels cannot contain whitespace"));
    }
    let param = if label == FIXED_MARKER {
        Param::Fixed
    } else {
        Param::Free(label.to_string())
    };
    let start = match rest.get(1) {
        Some(tok) => {
            let v: f64 = tok.parse().map_err(|_| NotationError::InvalidStart {
                line: line_no,
                token: tok.to_string(),
            })?;
            if !v.is_finite() {
                return Err(NotationError::InvalidStart {
                    line: line_no,
                    token: tok.to_string(),
                });
            }
            v
        }
        None if param == Param::Fixed => return Err(NotationError::FixedWithoutValue { line: line_no }),
        None if heads == Heads::Two && lhs == rhs => DEFAULT_VARIANCE_START,
        None => DEFAULT_PATH_START,
    };

    // Lag-0 covariance terms are symmetric, store them in a canonical order.
    let (from, to) = if heads == Heads::Two && lag == 0 && rhs < lhs {
        (rhs, lhs)
    } else {
        (lhs, rhs)
    };
    Ok(PathTerm {
        from: from.to_string(),
        to: to.to_string(),
        heads,
        lag,
        param,
        start,
    })
}

impl RamModel {
    /// Builds the model and its parameter table from already validated terms.
    /// Labels are indexed in order of first appearance; the first start value
    /// seen for a label wins.
    pub fn from_terms(kind: RamKind, terms: Vec<PathTerm>, variables: Vec<String>) -> Self {
        let mut ram = Self {
            kind,
            terms,
            variables,
            params: Vec::new(),
            max_lag: 0,
            warnings: Vec::new(),
            term_param: Vec::new(),
            term_vars: Vec::new(),
        };
        ram.reindex();
        ram
    }

    fn reindex(&mut self) {
        let var_index: HashMap<&str, usize> = self
            .variables
            .iter()
            .enumerate()
            .map(|(i, v)| (v.as_str(), i))
            .collect();
        self.params.clear();
        self.term_param.clear();
        self.term_vars.clear();
        self.warnings.clear();
        let mut label_index: HashMap<String, usize> = HashMap::new();
        for t in &self.terms {
            let idx = t.label().map(|l| {
                *label_index.entry(l.to_string()).or_insert_with(|| {
                    self.params.push(Parameter {
                        label: l.to_string(),
                        start: t.start,
                    });
                    self.params.len() - 1
                })
            });
            self.term_param.push(idx);
            self.term_vars.push((var_index[t.from.as_str()], var_index[t.to.as_str()]));
            if t.heads == Heads::Two && t.lag > 0 {
                self.warnings.push(format!(
                    "lagged two-headed term {} <-> {} at lag {} is compiled as a lagged exogenous loading",
                    t.from, t.to, t.lag
                ));
            }
        }
        self.max_lag = self.terms.iter().map(|t| t.lag).max().unwrap_or(0);
    }

    /// Appends a default standard-deviation term for every variable lacking an
    /// explicit lag-0 self term. Idempotent.
    pub fn augment_defaults(&mut self) {
        let explicit: HashSet<&str> = self
            .terms
            .iter()
            .filter(|t| t.is_self_variance())
            .map(|t| t.from.as_str())
            .collect();
        let missing: Vec<String> = self
            .variables
            .iter()
            .filter(|v| !explicit.contains(v.as_str()))
            .cloned()
            .collect();
        if missing.is_empty() {
            return;
        }
        for v in missing {
            self.terms.push(PathTerm {
                from: v.clone(),
                to: v.clone(),
                heads: Heads::Two,
                lag: 0,
                param: Param::Free(default_variance_label(&v)),
                start: DEFAULT_VARIANCE_START,
            });
        }
        self.reindex();
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    /// Parameter index of term `k`, or `None` when the term is fixed.
    pub fn term_param(&self, k: usize) -> Option<usize> {
        self.term_param[k]
    }

    /// `(from, to)` variable indices of term `k`.
    pub fn term_vars(&self, k: usize) -> (usize, usize) {
        self.term_vars[k]
    }

    pub fn param_index(&self, label: &str) -> Option<usize> {
        self.params.iter().position(|p| p.label == label)
    }

    pub fn start_values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.start).collect()
    }

    /// Value of term `k` under parameter vector `theta`.
    pub fn term_value(&self, k: usize, theta: &[f64]) -> f64 {
        match self.term_param[k] {
            Some(p) => theta[p],
            None => self.terms[k].start,
        }
    }

    /// True when a parameter only ever appears as a lag-0 self (co)variance.
    pub fn is_scale_param(&self, p: usize) -> bool {
        let mut any = false;
        for (k, t) in self.terms.iter().enumerate() {
            if self.term_param[k] == Some(p) {
                if !t.is_self_variance() {
                    return false;
                }
                any = true;
            }
        }
        any
    }

    /// Number of lag-0 self-variance terms fixed at exactly zero.
    pub fn zero_variance_count(&self) -> usize {
        self.terms
            .iter()
            .filter(|t| t.is_self_variance() && t.is_fixed() && t.start == 0.0)
            .count()
    }
}

pub fn default_variance_label(variable: &str) -> String {
    format!("V[{variable}]")
}

/// Canonical text form; parsing it with the parser matching `ram.kind`
/// reproduces `ram` term for term.
pub fn format_ram(ram: &RamModel) -> String {
    let mut out = String::new();
    for t in &ram.terms {
        let label = t.label().unwrap_or(FIXED_MARKER);
        match ram.kind {
            RamKind::Sem => writeln!(out, "{} {} {}, {}, {}", t.from, t.heads.arrow(), t.to, label, t.start),
            RamKind::Dsem => writeln!(
                out,
                "{} {} {}, {}, {}, {}",
                t.from,
                t.heads.arrow(),
                t.to,
                t.lag,
                label,
                t.start
            ),
        }
        .expect("writing to a String cannot fail");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    const EQ1: &str = "X -> Y, beta_1, 1\nX <-> X, sigma_X, 1\nY <-> Y, sigma_Y, 1\n";

    #[test]
    fn linear_model_has_three_terms_and_no_defaults() {
        let ram = parse_sem(EQ1, &vars(&["X", "Y"])).unwrap();
        assert_eq!(ram.terms.len(), 3);
        assert_eq!(ram.params.len(), 3);
        assert!(ram.terms.iter().all(|t| t.lag == 0));
        assert_eq!(ram.params[0], Parameter { label: "beta_1".into(), start: 1.0 });
    }

    #[test]
    fn empty_text_gets_default_variance() {
        let ram = parse_sem("", &vars(&["X"])).unwrap();
        assert_eq!(ram.terms.len(), 1);
        let t = &ram.terms[0];
        assert!(t.is_self_variance());
        assert_eq!(t.label(), Some("V[X]"));
        assert_eq!(t.start, DEFAULT_VARIANCE_START);
    }

    #[test]
    fn mediation_model_adds_three_variances() {
        let text = "X -> Y, beta_1\nY -> Z, beta_2\nX -> Z, beta_3\n";
        let ram = parse_sem(text, &vars(&["X", "Y", "Z"])).unwrap();
        assert_eq!(ram.terms.len(), 6);
        assert_eq!(ram.params.len(), 6);
        assert_eq!(ram.terms[0].start, DEFAULT_PATH_START);
    }

    #[test]
    fn shared_labels_resolve_to_one_parameter() {
        let text = "X -> Y, b\nY -> Z, b\n";
        let ram = parse_sem(text, &vars(&["X", "Y", "Z"])).unwrap();
        assert_eq!(ram.term_param(0), ram.term_param(1));
        assert_eq!(ram.params.len(), 4);
    }

    #[test]
    fn cross_lagged_model() {
        let text = "X -> X, 1, beta_xx, 0.1\nX -> Y, 1, beta_xy, 0.1\nY -> X, 1, beta_yx, 0.1\nY -> Y, 1, beta_yy, 0.1\n";
        let ram = parse_dsem(text, &vars(&["X", "Y"])).unwrap();
        assert_eq!(ram.terms.len(), 6);
        assert_eq!(ram.terms.iter().filter(|t| t.lag == 1).count(), 4);
        assert!(ram.terms[4..].iter().all(|t| t.is_self_variance()));
        assert_eq!(ram.max_lag, 1);
    }

    #[test]
    fn dynamic_factor_block() {
        let text = "F -> F, 1, NA, 1\nF -> X, 0, b_fx\nF -> Y, 0, b_fy\nF <-> F, 0, NA, 1\nX <-> X, 0, NA, 0\nY <-> Y, 0, NA, 0\n";
        let ram = parse_dsem(text, &vars(&["F", "X", "Y"])).unwrap();
        assert_eq!(ram.terms.len(), 6);
        assert_eq!(ram.params.len(), 2);
        assert_eq!(ram.zero_variance_count(), 2);
    }

    #[test]
    fn random_walk() {
        let ram = parse_dsem("X -> X, 1, NA, 1", &vars(&["X"])).unwrap();
        assert_eq!(ram.terms.len(), 2);
        assert!(ram.terms[0].is_fixed());
        assert_eq!(ram.terms[0].start, 1.0);
        assert_eq!(ram.params.len(), 1);
    }

    #[test]
    fn tolerates_whitespace_crlf_comments_and_trailing_comma() {
        let text = "# model\r\n  X->Y ,  b ,\r\n\r\n";
        let ram = parse_sem(text, &vars(&["X", "Y"])).unwrap();
        assert_eq!(ram.terms[0].label(), Some("b"));
    }

    #[test]
    fn covariance_terms_are_ordered() {
        let ram = parse_sem("Y <-> X, c", &vars(&["X", "Y"])).unwrap();
        assert_eq!((ram.terms[0].from.as_str(), ram.terms[0].to.as_str()), ("X", "Y"));
        let dup = parse_sem("Y <-> X, c\nX <-> Y, d", &vars(&["X", "Y"]));
        assert!(matches!(dup, Err(NotationError::DuplicateTerm { line: 2, .. })));
    }

    #[test]
    fn lagged_covariance_is_flagged() {
        let ram = parse_dsem("X <-> Y, 1, c", &vars(&["X", "Y"])).unwrap();
        assert_eq!(ram.warnings.len(), 1);
    }

    #[test]
    fn error_paths() {
        let v = vars(&["X", "Y"]);
        assert_eq!(
            parse_sem("X -> W, b", &v),
            Err(NotationError::UnknownVariable { line: 1, name: "W".into() })
        );
        assert!(matches!(
            parse_sem("X => Y, b", &v),
            Err(NotationError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            parse_sem("\nX -> Y", &v),
            Err(NotationError::Malformed { line: 2, .. })
        ));
        assert_eq!(
            parse_sem("X <-> X, a\nX <-> X, b", &v),
            Err(NotationError::DuplicateSelfVariance { line: 2, variable: "X".into() })
        );
        assert_eq!(parse_sem("X -> Y, NA", &v), Err(NotationError::FixedWithoutValue { line: 1 }));
        assert_eq!(
            parse_dsem("X -> Y, -1, b", &v),
            Err(NotationError::InvalidLag { line: 1, token: "-1".into() })
        );
        assert_eq!(
            parse_dsem("X -> Y, 1.5, b", &v),
            Err(NotationError::InvalidLag { line: 1, token: "1.5".into() })
        );
        assert!(matches!(parse_sem("X -> Y, b, abc", &v), Err(NotationError::InvalidStart { .. })));
        assert!(matches!(parse_sem("X -> Y, b, inf", &v), Err(NotationError::InvalidStart { .. })));
        // `na` is an ordinary label, only upper-case NA fixes a term
        assert!(parse_sem("X -> Y, na", &v).is_ok());
    }

    #[test]
    fn format_renders_defaults_explicitly() {
        let ram = parse_sem(EQ1, &vars(&["X", "Y"])).unwrap();
        let text = format_ram(&ram);
        assert_eq!(text.lines().count(), 3);
        assert_eq!(parse_sem(&text, &ram.variables).unwrap(), ram);

        let ram = parse_sem("X -> Y, b", &vars(&["X", "Y"])).unwrap();
        let text = format_ram(&ram);
        assert!(text.contains("X <-> X, V[X], 1"));
        assert_eq!(parse_sem(&text, &ram.variables).unwrap(), ram);
    }

    #[test]
    fn augmentation_is_idempotent() {
        let mut ram = parse_sem("X -> Y, b", &vars(&["X", "Y"])).unwrap();
        let before = ram.clone();
        ram.augment_defaults();
        assert_eq!(ram, before);
    }
}
