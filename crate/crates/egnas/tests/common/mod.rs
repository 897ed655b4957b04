//! Shared oracles for the integration suites: a central finite-difference
//! gradient checker, scalar-loop reference implementations of the update
//! rules, and a small DOT parser. Everything here is independent of the
//! tape implementation paths it checks.

#![allow(dead_code)]

use egnas::autodiff::Param;

/// Central finite differences with h = 1e-5 against the analytic gradient
/// accumulated by `loss_fn(true)`. Relative error per coordinate is
/// |analytic - fd| / max(1e-3, |analytic|, |fd|): pure relative error for
/// healthy gradient magnitudes, an absolute tolerance below 1e-3.
pub fn fd_max_rel_err(params: &[Param], mut loss_fn: impl FnMut(bool) -> f64) -> f64 {
    let h = 1e-5;
    for p in params {
        p.zero_grad();
    }
    let _ = loss_fn(true);
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad_or_zeros()).collect();
    let mut max_err: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        let len = p.value().data.len();
        for i in 0..len {
            let orig = p.value().data[i];
            p.value_mut().data[i] = orig + h;
            let up = loss_fn(false);
            p.value_mut().data[i] = orig - h;
            let down = loss_fn(false);
            p.value_mut().data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[pi][i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            max_err = max_err.max(err);
        }
    }
    max_err
}

// ── Scalar reference implementations ─────────────────────────────────────

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// y = x . w + b with w in (in x out) layout.
pub fn linear_ref(x: &[f64], w: &[Vec<f64>], b: Option<&[f64]>) -> Vec<f64> {
    let out_dim = w[0].len();
    let mut y = vec![0.0; out_dim];
    for (xi, wrow) in x.iter().zip(w) {
        for (o, wv) in y.iter_mut().zip(wrow) {
            *o += xi * wv;
        }
    }
    if let Some(b) = b {
        for (o, bv) in y.iter_mut().zip(b) {
            *o += bv;
        }
    }
    y
}

/// gamma = first half, beta = second half of the affine transform output.
pub fn film_gamma_beta_ref(cond: &[f64], w: &[Vec<f64>], b: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let gb = linear_ref(cond, w, Some(b));
    (gb[..d].to_vec(), gb[d..].to_vec())
}

/// FiLM edge update on one edge: gamma(joint) * e + beta(joint).
pub fn film_update_ref(e: &[f64], joint: &[f64], w: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let (gamma, beta) = film_gamma_beta_ref(joint, w, b, e.len());
    e.iter().zip(&gamma).zip(&beta).map(|((ev, g), bt)| g * ev + bt).collect()
}

/// Concat edge update on one edge: mlp([e || joint]).
pub fn concat_update_ref(e: &[f64], joint: &[f64], w: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let mut cat = e.to_vec();
    cat.extend_from_slice(joint);
    linear_ref(&cat, w, Some(b))
}

pub struct GruWeightsRef {
    pub joint: Vec<Vec<f64>>,
    pub reset_x: Vec<Vec<f64>>,
    pub reset_e: Vec<Vec<f64>>,
    pub update_x: Vec<Vec<f64>>,
    pub update_e: Vec<Vec<f64>>,
    pub cand_x: Vec<Vec<f64>>,
    pub cand_e: Vec<Vec<f64>>,
}

/// Gated edge update on one edge, straight from the equations:
/// x = relu(P.joint); r = s(U_r x + W_r e); z = s(U_z x + W_z e);
/// h = tanh(U_h x + W_h (r*e)); out = (1-z)*e + z*h.
pub fn gru_update_ref(e: &[f64], joint: &[f64], w: &GruWeightsRef) -> Vec<f64> {
    let x: Vec<f64> = linear_ref(joint, &w.joint, None).iter().map(|v| v.max(0.0)).collect();
    let r: Vec<f64> = linear_ref(&x, &w.reset_x, None)
        .iter()
        .zip(linear_ref(e, &w.reset_e, None))
        .map(|(a, b)| sigmoid(a + b))
        .collect();
    let z: Vec<f64> = linear_ref(&x, &w.update_x, None)
        .iter()
        .zip(linear_ref(e, &w.update_e, None))
        .map(|(a, b)| sigmoid(a + b))
        .collect();
    let re: Vec<f64> = r.iter().zip(e).map(|(rv, ev)| rv * ev).collect();
    let h: Vec<f64> = linear_ref(&x, &w.cand_x, None)
        .iter()
        .zip(linear_ref(&re, &w.cand_e, None))
        .map(|(a, b)| (a + b).tanh())
        .collect();
    z.iter().zip(e).zip(&h).map(|((zv, ev), hv)| (1.0 - zv) * ev + zv * hv).collect()
}

/// Brute-force segment reduction over rows.
pub fn segment_reduce_ref(
    values: &[Vec<f64>],
    segments: &[usize],
    num_segments: usize,
    mode: &str,
) -> Vec<Vec<f64>> {
    let cols = values.first().map_or(0, |r| r.len());
    let mut out = vec![vec![0.0; cols]; num_segments];
    for s in 0..num_segments {
        let members: Vec<usize> = (0..values.len()).filter(|&r| segments[r] == s).collect();
        if members.is_empty() {
            continue;
        }
        for c in 0..cols {
            let vals: Vec<f64> = members.iter().map(|&r| values[r][c]).collect();
            out[s][c] = match mode {
                "sum" => vals.iter().sum(),
                "mean" => vals.iter().sum::<f64>() / vals.len() as f64,
                "max" => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                _ => unreachable!(),
            };
        }
    }
    out
}

// ── Minimal DOT parser ───────────────────────────────────────────────────

/// Parsed statement counts from a DOT digraph document.
pub struct DotSummary {
    pub subgraphs: usize,
    pub nodes: usize,
    pub edges: usize,
}

/// Recursive-descent parser for the subset of the DOT grammar the export
/// uses: digraph ID { stmt* } with subgraphs, node statements with
/// attribute lists, edge statements `a -> b [attrs];` and `key=value;`.
pub fn parse_dot(text: &str) -> Result<DotSummary, String> {
    let mut tokens = tokenize(text)?;
    tokens.reverse(); // pop() from the front
    let mut summary = DotSummary { subgraphs: 0, nodes: 0, edges: 0 };
    expect_ident(&mut tokens, "digraph")?;
    let _name = pop_ident(&mut tokens)?;
    parse_body(&mut tokens, &mut summary)?;
    if !tokens.is_empty() {
        return Err(format!("trailing tokens: {tokens:?}"));
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Semi,
    Comma,
    Eq,
    Arrow,
}

fn tokenize(text: &str) -> Result<Vec<Tok>, String> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '{' => {
                out.push(Tok::LBrace);
                i += 1;
            }
            '}' => {
                out.push(Tok::RBrace);
                i += 1;
            }
            '[' => {
                out.push(Tok::LBracket);
                i += 1;
            }
            ']' => {
                out.push(Tok::RBracket);
                i += 1;
            }
            ';' => {
                out.push(Tok::Semi);
                i += 1;
            }
            ',' => {
                out.push(Tok::Comma);
                i += 1;
            }
            '=' => {
                out.push(Tok::Eq);
                i += 1;
            }
            '-' => {
                if chars.get(i + 1) == Some(&'>') {
                    out.push(Tok::Arrow);
                    i += 2;
                } else {
                    return Err(format!("stray '-' at {i}"));
                }
            }
            '"' => {
                let mut j = i + 1;
                while j < chars.len() && chars[j] != '"' {
                    j += 1;
                }
                if j >= chars.len() {
                    return Err("unterminated string".into());
                }
                out.push(Tok::Ident(chars[i + 1..j].iter().collect()));
                i = j + 1;
            }
            c if c.is_alphanumeric() || c == '_' => {
                let mut j = i;
                while j < chars.len() && (chars[j].is_alphanumeric() || chars[j] == '_') {
                    j += 1;
                }
                out.push(Tok::Ident(chars[i..j].iter().collect()));
                i = j;
            }
            other => return Err(format!("unexpected character {other:?} at {i}")),
        }
    }
    Ok(out)
}

fn expect_ident(tokens: &mut Vec<Tok>, what: &str) -> Result<(), String> {
    match tokens.pop() {
        Some(Tok::Ident(s)) if s == what => Ok(()),
        other => Err(format!("expected {what}, got {other:?}")),
    }
}

fn pop_ident(tokens: &mut Vec<Tok>) -> Result<String, String> {
    match tokens.pop() {
        Some(Tok::Ident(s)) => Ok(s),
        other => Err(format!("expected identifier, got {other:?}")),
    }
}

fn expect(tokens: &mut Vec<Tok>, tok: Tok) -> Result<(), String> {
    match tokens.pop() {
        Some(t) if t == tok => Ok(()),
        other => Err(format!("expected {tok:?}, got {other:?}")),
    }
}

fn parse_attr_list(tokens: &mut Vec<Tok>) -> Result<(), String> {
    expect(tokens, Tok::LBracket)?;
    loop {
        match tokens.pop() {
            Some(Tok::RBracket) => return Ok(()),
            Some(Tok::Ident(_)) => {
                expect(tokens, Tok::Eq)?;
                pop_ident(tokens)?;
                if tokens.last() == Some(&Tok::Comma) {
                    tokens.pop();
                }
            }
            other => return Err(format!("bad attribute list near {other:?}")),
        }
    }
}

fn parse_body(tokens: &mut Vec<Tok>, summary: &mut DotSummary) -> Result<(), String> {
    expect(tokens, Tok::LBrace)?;
    loop {
        match tokens.pop() {
            Some(Tok::RBrace) => return Ok(()),
            Some(Tok::Ident(id)) if id == "subgraph" => {
                summary.subgraphs += 1;
                pop_ident(tokens)?;
                parse_body(tokens, summary)?;
            }
            Some(Tok::Ident(_id)) => {
                // node stmt, edge stmt, or key=value
                match tokens.pop() {
                    Some(Tok::Eq) => {
                        pop_ident(tokens)?;
                        expect(tokens, Tok::Semi)?;
                    }
                    Some(Tok::Arrow) => {
                        pop_ident(tokens)?;
                        summary.edges += 1;
                        if tokens.last() == Some(&Tok::LBracket) {
                            parse_attr_list(tokens)?;
                        }
                        expect(tokens, Tok::Semi)?;
                    }
                    Some(Tok::LBracket) => {
                        tokens.push(Tok::LBracket);
                        summary.nodes += 1;
                        parse_attr_list(tokens)?;
                        expect(tokens, Tok::Semi)?;
                    }
                    Some(Tok::Semi) => {
                        summary.nodes += 1;
                    }
                    other => return Err(format!("bad statement near {other:?}")),
                }
            }
            other => return Err(format!("bad body near {other:?}")),
        }
    }
}
