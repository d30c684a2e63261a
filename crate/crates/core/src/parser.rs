//! Concrete syntax for process documents (`.glp`) and policies (`.pol`),
//! plus the pretty-printer.
//!
//! Token rules, frozen here and in `docs/formats.md`:
//!
//! * identifiers: `[A-Za-z_][A-Za-z0-9_]*`; resource identifiers carry a
//!   leading `#` sigil.
//! * processes: `0`, `pi . P`, `new x. P`, `P + P`, `P | P`, `!P`,
//!   `res #r, policy, trace { P } @label`, `req #r { P } @label`,
//!   parentheses, and references to named processes. `|` binds loosest,
//!   then `+`, then prefixing.
//! * prefixes: `tau`, `x(y)`, `x(#s)`, `x?(#s)` (explicit input marker),
//!   `x<name>`, `action(#r)`, `rel(#r)`.
//! * a prefix `ident(#r)` is an input when `ident` is used as a channel
//!   somewhere in the document (output subject, `new` binder, or input with
//!   an unsigiled binder); otherwise it is an access action. The `?` form
//!   forces the input reading; the printer always emits it for resource
//!   binders.
//! * traces: `eps` or `act.act...`; comments: `//` to end of line.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use crate::ast::{
    self, ActionName, Boundary, BoundaryLabel, Event, Name, NameKind, Prefix, Request, Term, Trace,
};
use crate::error::{Error, Result};
use crate::policy::{MissingRule, PolicyAutomaton, PolicyBuilder, PolicyTable};
use crate::semantics::ReconfigEvent;

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Resource(String),
    Number(u64),
    LParen,
    RParen,
    LBrace,
    RBrace,
    Lt,
    Gt,
    Dot,
    Comma,
    Bar,
    Plus,
    Bang,
    At,
    Eq,
    Semi,
    Minus,
    Arrow,
    Question,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "{s}"),
            Tok::Resource(s) => write!(f, "#{s}"),
            Tok::Number(n) => write!(f, "{n}"),
            Tok::LParen => write!(f, "("),
            Tok::RParen => write!(f, ")"),
            Tok::LBrace => write!(f, "{{"),
            Tok::RBrace => write!(f, "}}"),
            Tok::Lt => write!(f, "<"),
            Tok::Gt => write!(f, ">"),
            Tok::Dot => write!(f, "."),
            Tok::Comma => write!(f, ","),
            Tok::Bar => write!(f, "|"),
            Tok::Plus => write!(f, "+"),
            Tok::Bang => write!(f, "!"),
            Tok::At => write!(f, "@"),
            Tok::Eq => write!(f, "="),
            Tok::Semi => write!(f, ";"),
            Tok::Minus => write!(f, "-"),
            Tok::Arrow => write!(f, "->"),
            Tok::Question => write!(f, "?"),
            Tok::Eof => write!(f, "<eof>"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Pos {
    line: usize,
    col: usize,
}

struct Lexer {
    toks: Vec<(Tok, Pos)>,
    at: usize,
}

fn lex(text: &str) -> Result<Vec<(Tok, Pos)>> {
    let mut out = Vec::new();
    let mut line = 1usize;
    let mut col = 1usize;
    let bytes: Vec<char> = text.chars().collect();
    let mut i = 0usize;
    let err = |line, col, msg: String| Error::Parse { line, col, msg };
    while i < bytes.len() {
        let c = bytes[i];
        let pos = Pos { line, col };
        match c {
            '\n' => {
                line += 1;
                col = 1;
                i += 1;
            }
            ' ' | '\t' | '\r' => {
                col += 1;
                i += 1;
            }
            '/' if i + 1 < bytes.len() && bytes[i + 1] == '/' => {
                while i < bytes.len() && bytes[i] != '\n' {
                    i += 1;
                    col += 1;
                }
            }
            '#' => {
                let start = i + 1;
                let mut j = start;
                while j < bytes.len() && (bytes[j].is_alphanumeric() || bytes[j] == '_') {
                    j += 1;
                }
                if j == start || bytes[start].is_ascii_digit() {
                    return Err(err(line, col, "expected identifier after '#'".into()));
                }
                let s: String = bytes[start..j].iter().collect();
                out.push((Tok::Resource(s), pos));
                col += j - i;
                i = j;
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut j = i;
                while j < bytes.len() && (bytes[j].is_alphanumeric() || bytes[j] == '_') {
                    j += 1;
                }
                let s: String = bytes[i..j].iter().collect();
                out.push((Tok::Ident(s), pos));
                col += j - i;
                i = j;
            }
            c if c.is_ascii_digit() => {
                let mut j = i;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                let s: String = bytes[i..j].iter().collect();
                let n = s.parse::<u64>().map_err(|_| err(line, col, format!("bad number {s}")))?;
                out.push((Tok::Number(n), pos));
                col += j - i;
                i = j;
            }
            '-' => {
                if i + 1 < bytes.len() && bytes[i + 1] == '>' {
                    out.push((Tok::Arrow, pos));
                    col += 2;
                    i += 2;
                } else {
                    out.push((Tok::Minus, pos));
                    col += 1;
                    i += 1;
                }
            }
            _ => {
                let tok = match c {
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    '{' => Tok::LBrace,
                    '}' => Tok::RBrace,
                    '<' => Tok::Lt,
                    '>' => Tok::Gt,
                    '.' => Tok::Dot,
                    ',' => Tok::Comma,
                    '|' => Tok::Bar,
                    '+' => Tok::Plus,
                    '!' => Tok::Bang,
                    '@' => Tok::At,
                    '=' => Tok::Eq,
                    ';' => Tok::Semi,
                    '?' => Tok::Question,
                    other => return Err(err(line, col, format!("unexpected character {other:?}"))),
                };
                out.push((tok, pos));
                col += 1;
                i += 1;
            }
        }
    }
    out.push((Tok::Eof, Pos { line, col }));
    Ok(out)
}

impl Lexer {
    fn new(text: &str) -> Result<Self> {
        Ok(Lexer { toks: lex(text)?, at: 0 })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.at + 1).min(self.toks.len() - 1)].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn next(&mut self) -> Tok {
        let t = self.toks[self.at].0.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        let p = self.pos();
        Err(Error::Parse { line: p.line, col: p.col, msg: msg.into() })
    }

    fn expect(&mut self, t: Tok) -> Result<()> {
        if *self.peek() == t {
            self.next();
            Ok(())
        } else {
            self.err(format!("expected '{t}', found '{}'", self.peek()))
        }
    }

    fn ident(&mut self) -> Result<String> {
        if let Tok::Ident(s) = self.peek() {
            let s = s.clone();
            self.next();
            Ok(s)
        } else {
            self.err(format!("expected identifier, found '{}'", self.peek()))
        }
    }

    fn resource(&mut self) -> Result<String> {
        if let Tok::Resource(s) = self.peek() {
            let s = s.clone();
            self.next();
            Ok(s)
        } else {
            self.err(format!("expected '#resource', found '{}'", self.peek()))
        }
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.peek() == t {
            self.next();
            true
        } else {
            false
        }
    }
}

// ---------------------------------------------------------------------------
// Raw syntax tree (pre name-resolution)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum RawName {
    Chan(String),
    Res(String),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum RawPrefix {
    Tau,
    /// `x(y)`: unambiguous channel-binder input.
    InputChan(String, String),
    /// `x?(#s)` or resolved `x(#s)`: resource-binder input.
    InputRes(String, String),
    /// `ident(#r)` whose reading depends on document-wide channel evidence.
    Ambiguous(String, String),
    Output(String, RawName),
    Access(String, String),
    Release(String),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum RawTerm {
    Nil,
    Prefix(RawPrefix, Box<RawTerm>),
    Restrict(String, Box<RawTerm>),
    Choice(Box<RawTerm>, Box<RawTerm>),
    Par(Box<RawTerm>, Box<RawTerm>),
    Boundary { resource: String, policy: String, state: Trace, label: Option<String>, body: Box<RawTerm> },
    Request { resource: String, label: Option<String>, body: Box<RawTerm> },
    Replicate(Box<RawTerm>),
    Ref(String),
}

#[derive(Debug, Clone)]
pub(crate) struct RawScript {
    pub kind: RawScriptKind,
    pub at_step: u64,
}

#[derive(Debug, Clone)]
pub(crate) enum RawScriptKind {
    Appear { resource: String, policy: String, state: Trace },
    Disappear { resource: String },
}

// ---------------------------------------------------------------------------
// Document parsing
// ---------------------------------------------------------------------------

/// A parsed `.glp` document: named process definitions, inline policy
/// definitions, the entry point, and an optional reconfiguration script.
#[derive(Debug, Clone)]
pub struct SourceDocument {
    pub policies: PolicyTable,
    raw_defs: Vec<(String, RawTerm)>,
    pub entry: String,
    script: Vec<RawScript>,
    /// Entry process with references inlined, kinds resolved and canonical
    /// sites assigned.
    pub term: Arc<Term>,
}

impl SourceDocument {
    /// Names of the defined processes, in declaration order.
    pub fn process_names(&self) -> impl Iterator<Item = &str> {
        self.raw_defs.iter().map(|(n, _)| n.as_str())
    }

    /// Resolve policy references against this document's policies plus the
    /// given external table.
    pub fn resolve(&self, external: &PolicyTable) -> Result<Model> {
        let mut table = external.clone();
        table.merge(self.policies.clone());
        let mut missing = BTreeSet::new();
        check_policies(&self.term, &table, &mut missing);
        let mut script = Vec::new();
        let mut last: Option<u64> = None;
        for ev in &self.script {
            if let Some(prev) = last {
                if ev.at_step <= prev {
                    return Err(Error::ScriptOrder);
                }
            }
            last = Some(ev.at_step);
            match &ev.kind {
                RawScriptKind::Appear { resource, policy, state } => {
                    if table.get(policy).is_none() {
                        missing.insert(policy.clone());
                    }
                    script.push(ReconfigEvent::Appear {
                        resource: Name::resource(resource),
                        policy: policy.as_str().into(),
                        state: state.clone(),
                        at_step: ev.at_step,
                    });
                }
                RawScriptKind::Disappear { resource } => {
                    script.push(ReconfigEvent::Disappear {
                        resource: Name::resource(resource),
                        at_step: ev.at_step,
                    });
                }
            }
        }
        if let Some(name) = missing.into_iter().next() {
            return Err(Error::UnknownPolicy(name));
        }
        Ok(Model { term: self.term.clone(), policies: table, script })
    }
}

fn check_policies(t: &Term, table: &PolicyTable, missing: &mut BTreeSet<String>) {
    match t {
        Term::Nil => {}
        Term::Prefix(_, k) => check_policies(k, table, missing),
        Term::Restrict(_, b) | Term::Replicate(b, _) => check_policies(b, table, missing),
        Term::Choice(l, r) | Term::Par(l, r) => {
            check_policies(l, table, missing);
            check_policies(r, table, missing);
        }
        Term::Boundary(b) => {
            if table.get(&b.policy).is_none() {
                missing.insert(b.policy.to_string());
            }
            check_policies(&b.body, table, missing);
        }
        Term::Request(r) => check_policies(&r.body, table, missing),
    }
}

/// A document bound to concrete policies: ready to execute or analyse.
#[derive(Debug, Clone)]
pub struct Model {
    pub term: Arc<Term>,
    pub policies: PolicyTable,
    pub script: Vec<ReconfigEvent>,
}

/// Parse a `.glp` document.
pub fn parse(text: &str) -> Result<SourceDocument> {
    let mut lx = Lexer::new(text)?;
    let mut policies = PolicyTable::new();
    let mut raw_defs: Vec<(String, RawTerm)> = Vec::new();
    let mut entry: Option<String> = None;
    let mut script = Vec::new();
    loop {
        match lx.peek().clone() {
            Tok::Eof => break,
            Tok::Ident(kw) if kw == "policy" => {
                policies.insert(parse_policy_block(&mut lx)?);
            }
            Tok::Ident(kw) if kw == "process" => {
                lx.next();
                let name = lx.ident()?;
                if raw_defs.iter().any(|(n, _)| *n == name) {
                    return Err(Error::DuplicateProcess(name));
                }
                lx.expect(Tok::Eq)?;
                let body = parse_par(&mut lx)?;
                raw_defs.push((name, body));
            }
            Tok::Ident(kw) if kw == "entry" => {
                lx.next();
                entry = Some(lx.ident()?);
            }
            Tok::Ident(kw) if kw == "script" => {
                lx.next();
                lx.expect(Tok::LBrace)?;
                while !lx.eat(&Tok::RBrace) {
                    let kw = lx.ident()?;
                    match kw.as_str() {
                        "appear" => {
                            let resource = lx.resource()?;
                            let policy = lx.ident()?;
                            let state = parse_trace(&mut lx)?;
                            lx.expect(Tok::At)?;
                            let at_step = parse_number(&mut lx)?;
                            lx.eat(&Tok::Semi);
                            script.push(RawScript {
                                kind: RawScriptKind::Appear { resource, policy, state },
                                at_step,
                            });
                        }
                        "disappear" => {
                            let resource = lx.resource()?;
                            lx.expect(Tok::At)?;
                            let at_step = parse_number(&mut lx)?;
                            lx.eat(&Tok::Semi);
                            script.push(RawScript { kind: RawScriptKind::Disappear { resource }, at_step });
                        }
                        other => return lx.err(format!("expected 'appear' or 'disappear', found '{other}'")),
                    }
                }
            }
            other => return lx.err(format!("expected a top-level declaration, found '{other}'")),
        }
    }
    let entry = match entry {
        Some(e) => e,
        None if raw_defs.iter().any(|(n, _)| n == "Main") => "Main".to_string(),
        None => return Err(Error::NoEntry),
    };
    if !raw_defs.iter().any(|(n, _)| *n == entry) {
        return Err(Error::UnknownProcess(entry));
    }

    // Document-wide channel evidence resolves `ident(#r)` prefixes.
    let mut evidence = BTreeSet::new();
    for (_, t) in &raw_defs {
        collect_channel_evidence(t, &mut evidence);
    }
    let resolved_defs: Vec<(String, RawTerm)> = raw_defs
        .iter()
        .map(|(n, t)| (n.clone(), resolve_ambiguous(t, &evidence)))
        .collect();

    // Inline process references, then assign kinds and canonical sites.
    let inlined = inline(&entry, &resolved_defs, &mut Vec::new())?;
    let mut resolver = NameResolver::new();
    let term = resolver.term(&inlined, &mut Vec::new())?;

    Ok(SourceDocument { policies, raw_defs: resolved_defs, entry, script, term })
}

/// Parse a single process expression as a document with one definition.
pub fn parse_process(text: &str) -> Result<Arc<Term>> {
    let doc = parse(&format!("process Main = {text}\nentry Main\n"))?;
    Ok(doc.term)
}

fn parse_number(lx: &mut Lexer) -> Result<u64> {
    if let Tok::Number(n) = lx.peek() {
        let n = *n;
        lx.next();
        Ok(n)
    } else {
        lx.err(format!("expected a number, found '{}'", lx.peek()))
    }
}

// ---------------------------------------------------------------------------
// Process expressions
// ---------------------------------------------------------------------------

fn parse_par(lx: &mut Lexer) -> Result<RawTerm> {
    let mut t = parse_choice(lx)?;
    while lx.eat(&Tok::Bar) {
        let rhs = parse_choice(lx)?;
        t = RawTerm::Par(Box::new(t), Box::new(rhs));
    }
    Ok(t)
}

fn parse_choice(lx: &mut Lexer) -> Result<RawTerm> {
    let mut t = parse_seq(lx)?;
    while lx.eat(&Tok::Plus) {
        let rhs = parse_seq(lx)?;
        t = RawTerm::Choice(Box::new(t), Box::new(rhs));
    }
    Ok(t)
}

fn parse_seq(lx: &mut Lexer) -> Result<RawTerm> {
    match lx.peek().clone() {
        Tok::Bang => {
            lx.next();
            Ok(RawTerm::Replicate(Box::new(parse_seq(lx)?)))
        }
        Tok::Number(0) => {
            lx.next();
            Ok(RawTerm::Nil)
        }
        Tok::Number(_) => lx.err("expected a process"),
        Tok::LParen => {
            lx.next();
            let t = parse_par(lx)?;
            lx.expect(Tok::RParen)?;
            Ok(t)
        }
        Tok::Ident(kw) if kw == "new" => {
            lx.next();
            if matches!(lx.peek(), Tok::Resource(_)) {
                return lx.err("restriction is not applied to resource names");
            }
            let n = lx.ident()?;
            lx.expect(Tok::Dot)?;
            let body = parse_seq(lx)?;
            Ok(RawTerm::Restrict(n, Box::new(body)))
        }
        Tok::Ident(kw) if kw == "tau" => {
            lx.next();
            lx.expect(Tok::Dot)?;
            Ok(RawTerm::Prefix(RawPrefix::Tau, Box::new(parse_seq(lx)?)))
        }
        Tok::Ident(kw) if kw == "rel" => {
            lx.next();
            lx.expect(Tok::LParen)?;
            let r = lx.resource()?;
            lx.expect(Tok::RParen)?;
            lx.expect(Tok::Dot)?;
            Ok(RawTerm::Prefix(RawPrefix::Release(r), Box::new(parse_seq(lx)?)))
        }
        Tok::Ident(kw) if kw == "res" => {
            lx.next();
            let resource = lx.resource()?;
            lx.expect(Tok::Comma)?;
            let policy = lx.ident()?;
            lx.expect(Tok::Comma)?;
            let state = parse_trace(lx)?;
            lx.expect(Tok::LBrace)?;
            let body = parse_par(lx)?;
            lx.expect(Tok::RBrace)?;
            let label = parse_label(lx)?;
            Ok(RawTerm::Boundary { resource, policy, state, label, body: Box::new(body) })
        }
        Tok::Ident(kw) if kw == "req" => {
            lx.next();
            let resource = lx.resource()?;
            lx.expect(Tok::LBrace)?;
            let body = parse_par(lx)?;
            lx.expect(Tok::RBrace)?;
            let label = parse_label(lx)?;
            Ok(RawTerm::Request { resource, label, body: Box::new(body) })
        }
        Tok::Ident(_) => {
            let subject = lx.ident()?;
            match lx.peek().clone() {
                Tok::Question => {
                    lx.next();
                    lx.expect(Tok::LParen)?;
                    let binder = match lx.peek().clone() {
                        Tok::Resource(s) => {
                            lx.next();
                            RawPrefix::InputRes(subject, s)
                        }
                        Tok::Ident(s) => {
                            lx.next();
                            RawPrefix::InputChan(subject, s)
                        }
                        _ => return lx.err("expected a binder"),
                    };
                    lx.expect(Tok::RParen)?;
                    lx.expect(Tok::Dot)?;
                    Ok(RawTerm::Prefix(binder, Box::new(parse_seq(lx)?)))
                }
                Tok::LParen => {
                    lx.next();
                    let p = match lx.peek().clone() {
                        Tok::Ident(s) => {
                            lx.next();
                            RawPrefix::InputChan(subject, s)
                        }
                        Tok::Resource(s) => {
                            lx.next();
                            RawPrefix::Ambiguous(subject, s)
                        }
                        _ => return lx.err("expected a binder or '#resource'"),
                    };
                    lx.expect(Tok::RParen)?;
                    lx.expect(Tok::Dot)?;
                    Ok(RawTerm::Prefix(p, Box::new(parse_seq(lx)?)))
                }
                Tok::Lt => {
                    lx.next();
                    let payload = match lx.peek().clone() {
                        Tok::Ident(s) => {
                            lx.next();
                            RawName::Chan(s)
                        }
                        Tok::Resource(s) => {
                            lx.next();
                            RawName::Res(s)
                        }
                        _ => return lx.err("expected a name"),
                    };
                    lx.expect(Tok::Gt)?;
                    lx.expect(Tok::Dot)?;
                    Ok(RawTerm::Prefix(RawPrefix::Output(subject, payload), Box::new(parse_seq(lx)?)))
                }
                _ => Ok(RawTerm::Ref(subject)),
            }
        }
        other => lx.err(format!("expected a process, found '{other}'")),
    }
}

fn parse_label(lx: &mut Lexer) -> Result<Option<String>> {
    if lx.eat(&Tok::At) {
        Ok(Some(lx.ident()?))
    } else {
        Ok(None)
    }
}

fn parse_trace(lx: &mut Lexer) -> Result<Trace> {
    let first = lx.ident()?;
    if first == "eps" {
        return Ok(Trace::empty());
    }
    let mut evs = vec![trace_event(&first)];
    while *lx.peek() == Tok::Dot {
        lx.next();
        let a = lx.ident()?;
        evs.push(trace_event(&a));
    }
    Ok(Trace(evs))
}

fn trace_event(s: &str) -> Event {
    if s == "rel" {
        Event::Rel
    } else {
        Event::Act(ActionName::new(s))
    }
}

// ---------------------------------------------------------------------------
// Ambiguity resolution and inlining
// ---------------------------------------------------------------------------

fn collect_channel_evidence(t: &RawTerm, out: &mut BTreeSet<String>) {
    match t {
        RawTerm::Nil | RawTerm::Ref(_) => {}
        RawTerm::Prefix(p, k) => {
            match p {
                RawPrefix::Output(x, _) => {
                    out.insert(x.clone());
                }
                RawPrefix::InputChan(x, y) => {
                    out.insert(x.clone());
                    out.insert(y.clone());
                }
                RawPrefix::InputRes(x, _) => {
                    out.insert(x.clone());
                }
                _ => {}
            }
            collect_channel_evidence(k, out);
        }
        RawTerm::Restrict(n, b) => {
            out.insert(n.clone());
            collect_channel_evidence(b, out);
        }
        RawTerm::Choice(l, r) | RawTerm::Par(l, r) => {
            collect_channel_evidence(l, out);
            collect_channel_evidence(r, out);
        }
        RawTerm::Boundary { body, .. } | RawTerm::Request { body, .. } => {
            collect_channel_evidence(body, out);
        }
        RawTerm::Replicate(b) => collect_channel_evidence(b, out),
    }
}

fn resolve_ambiguous(t: &RawTerm, chans: &BTreeSet<String>) -> RawTerm {
    match t {
        RawTerm::Nil => RawTerm::Nil,
        RawTerm::Ref(n) => RawTerm::Ref(n.clone()),
        RawTerm::Prefix(p, k) => {
            let p2 = match p {
                RawPrefix::Ambiguous(subj, res) => {
                    if chans.contains(subj) {
                        RawPrefix::InputRes(subj.clone(), res.clone())
                    } else {
                        RawPrefix::Access(subj.clone(), res.clone())
                    }
                }
                other => other.clone(),
            };
            RawTerm::Prefix(p2, Box::new(resolve_ambiguous(k, chans)))
        }
        RawTerm::Restrict(n, b) => RawTerm::Restrict(n.clone(), Box::new(resolve_ambiguous(b, chans))),
        RawTerm::Choice(l, r) => RawTerm::Choice(
            Box::new(resolve_ambiguous(l, chans)),
            Box::new(resolve_ambiguous(r, chans)),
        ),
        RawTerm::Par(l, r) => RawTerm::Par(
            Box::new(resolve_ambiguous(l, chans)),
            Box::new(resolve_ambiguous(r, chans)),
        ),
        RawTerm::Boundary { resource, policy, state, label, body } => RawTerm::Boundary {
            resource: resource.clone(),
            policy: policy.clone(),
            state: state.clone(),
            label: label.clone(),
            body: Box::new(resolve_ambiguous(body, chans)),
        },
        RawTerm::Request { resource, label, body } => RawTerm::Request {
            resource: resource.clone(),
            label: label.clone(),
            body: Box::new(resolve_ambiguous(body, chans)),
        },
        RawTerm::Replicate(b) => RawTerm::Replicate(Box::new(resolve_ambiguous(b, chans))),
    }
}

fn inline(name: &str, defs: &[(String, RawTerm)], stack: &mut Vec<String>) -> Result<RawTerm> {
    if stack.iter().any(|n| n == name) {
        return Err(Error::RecursiveProcess(name.to_string()));
    }
    let def = defs
        .iter()
        .find(|(n, _)| n == name)
        .ok_or_else(|| Error::UnknownProcess(name.to_string()))?;
    stack.push(name.to_string());
    let out = inline_term(&def.1, defs, stack)?;
    stack.pop();
    Ok(out)
}

fn inline_term(t: &RawTerm, defs: &[(String, RawTerm)], stack: &mut Vec<String>) -> Result<RawTerm> {
    Ok(match t {
        RawTerm::Nil => RawTerm::Nil,
        RawTerm::Ref(n) => inline(n, defs, stack)?,
        RawTerm::Prefix(p, k) => RawTerm::Prefix(p.clone(), Box::new(inline_term(k, defs, stack)?)),
        RawTerm::Restrict(n, b) => RawTerm::Restrict(n.clone(), Box::new(inline_term(b, defs, stack)?)),
        RawTerm::Choice(l, r) => RawTerm::Choice(
            Box::new(inline_term(l, defs, stack)?),
            Box::new(inline_term(r, defs, stack)?),
        ),
        RawTerm::Par(l, r) => RawTerm::Par(
            Box::new(inline_term(l, defs, stack)?),
            Box::new(inline_term(r, defs, stack)?),
        ),
        RawTerm::Boundary { resource, policy, state, label, body } => RawTerm::Boundary {
            resource: resource.clone(),
            policy: policy.clone(),
            state: state.clone(),
            label: label.clone(),
            body: Box::new(inline_term(body, defs, stack)?),
        },
        RawTerm::Request { resource, label, body } => RawTerm::Request {
            resource: resource.clone(),
            label: label.clone(),
            body: Box::new(inline_term(body, defs, stack)?),
        },
        RawTerm::Replicate(b) => RawTerm::Replicate(Box::new(inline_term(b, defs, stack)?)),
    })
}

// ---------------------------------------------------------------------------
// Name resolution: kinds, scopes and canonical sites
// ---------------------------------------------------------------------------

struct NameResolver {
    next_site: u32,
}

impl NameResolver {
    fn new() -> Self {
        NameResolver { next_site: 0 }
    }

    fn bind(&mut self, base: &str, kind: NameKind) -> Name {
        self.next_site += 1;
        Name::var(base, self.next_site, kind)
    }

    fn lookup_chan(&self, base: &str, env: &[Name]) -> Name {
        env.iter()
            .rev()
            .find(|n| n.kind.is_channel() && n.base.as_ref() == base)
            .cloned()
            .unwrap_or_else(|| Name::channel(base))
    }

    fn lookup_res(&self, base: &str, env: &[Name]) -> Name {
        env.iter()
            .rev()
            .find(|n| n.kind.is_resource() && n.base.as_ref() == base)
            .cloned()
            .unwrap_or_else(|| Name::resource(base))
    }

    fn raw_name(&self, rn: &RawName, env: &[Name]) -> Name {
        match rn {
            RawName::Chan(s) => self.lookup_chan(s, env),
            RawName::Res(s) => self.lookup_res(s, env),
        }
    }

    fn term(&mut self, t: &RawTerm, env: &mut Vec<Name>) -> Result<Arc<Term>> {
        Ok(match t {
            RawTerm::Nil => Term::nil(),
            RawTerm::Ref(n) => return Err(Error::UnknownProcess(n.clone())),
            RawTerm::Prefix(p, k) => {
                let (prefix, binder) = match p {
                    RawPrefix::Tau => (Prefix::Tau, None),
                    RawPrefix::InputChan(x, y) => {
                        let subj = self.lookup_chan(x, env);
                        let b = self.bind(y, NameKind::ChannelVar);
                        (Prefix::Input(subj, b.clone()), Some(b))
                    }
                    RawPrefix::InputRes(x, s) => {
                        let subj = self.lookup_chan(x, env);
                        let b = self.bind(s, NameKind::ResourceVar);
                        (Prefix::Input(subj, b.clone()), Some(b))
                    }
                    RawPrefix::Ambiguous(x, s) => {
                        // unreached after resolve_ambiguous; treat as access
                        (Prefix::Access(ActionName::new(x), self.lookup_res(s, env)), None)
                    }
                    RawPrefix::Output(x, v) => {
                        (Prefix::Output(self.lookup_chan(x, env), self.raw_name(v, env)), None)
                    }
                    RawPrefix::Access(a, r) => {
                        (Prefix::Access(ActionName::new(a), self.lookup_res(r, env)), None)
                    }
                    RawPrefix::Release(r) => (Prefix::Release(self.lookup_res(r, env)), None),
                };
                if let Some(b) = binder {
                    env.push(b);
                    let body = self.term(k, env)?;
                    env.pop();
                    Term::prefix(prefix, body)
                } else {
                    Term::prefix(prefix, self.term(k, env)?)
                }
            }
            RawTerm::Restrict(n, b) => {
                let binder = self.bind(n, NameKind::ChannelVar);
                env.push(binder.clone());
                let body = self.term(b, env)?;
                env.pop();
                Term::restrict(binder, body)
            }
            RawTerm::Choice(l, r) => Term::choice(self.term(l, env)?, self.term(r, env)?),
            RawTerm::Par(l, r) => Term::par(self.term(l, env)?, self.term(r, env)?),
            RawTerm::Boundary { resource, policy, state, label, body } => {
                let res = self.lookup_res(resource, env);
                let body = self.term(body, env)?;
                Arc::new(Term::Boundary(Boundary {
                    resource: res,
                    policy: policy.as_str().into(),
                    state: state.clone(),
                    label: label.as_deref().map(BoundaryLabel::new),
                    entered: Vec::new(),
                    body,
                }))
            }
            RawTerm::Request { resource, label, body } => {
                let res = self.lookup_res(resource, env);
                let body = self.term(body, env)?;
                Arc::new(Term::Request(Request {
                    resource: res,
                    label: label.as_deref().map(BoundaryLabel::new),
                    body,
                }))
            }
            RawTerm::Replicate(b) => Term::replicate(self.term(b, env)?, None),
        })
    }
}

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

fn parse_policy_block(lx: &mut Lexer) -> Result<PolicyAutomaton> {
    let kw = lx.ident()?;
    if kw != "policy" {
        return lx.err("expected 'policy'");
    }
    let name = lx.ident()?;
    lx.expect(Tok::LBrace)?;
    let mut initial: Option<String> = None;
    let mut violating: Vec<String> = Vec::new();
    let mut missing = MissingRule::Violate;
    let mut transitions: Vec<(String, String, String)> = Vec::new();
    while !lx.eat(&Tok::RBrace) {
        let word = lx.ident()?;
        match word.as_str() {
            "initial" => {
                initial = Some(lx.ident()?);
                lx.expect(Tok::Semi)?;
            }
            "violating" => {
                violating.push(lx.ident()?);
                while lx.eat(&Tok::Comma) {
                    violating.push(lx.ident()?);
                }
                lx.expect(Tok::Semi)?;
            }
            "missing" => {
                let rule = lx.ident()?;
                missing = match rule.as_str() {
                    "violate" => MissingRule::Violate,
                    "stay" => MissingRule::Stay,
                    other => return lx.err(format!("unknown missing rule '{other}'")),
                };
                lx.expect(Tok::Semi)?;
            }
            from => {
                lx.expect(Tok::Minus)?;
                let action = lx.ident()?;
                lx.expect(Tok::Arrow)?;
                let to = lx.ident()?;
                lx.expect(Tok::Semi)?;
                transitions.push((from.to_string(), action, to));
            }
        }
    }
    let initial = match initial {
        Some(i) => i,
        None => return lx.err(format!("policy {name} has no initial state")),
    };
    let mut b = PolicyBuilder::new(&name, missing);
    b.set_initial(&initial);
    for v in &violating {
        b.mark_violating(v);
    }
    for (from, act, to) in &transitions {
        b.add_transition(from, act, to)?;
    }
    Ok(b.finish())
}

/// Parse a single policy definition.
pub fn parse_policy(text: &str) -> Result<PolicyAutomaton> {
    let mut lx = Lexer::new(text)?;
    let p = parse_policy_block(&mut lx)?;
    if *lx.peek() != Tok::Eof {
        return lx.err("trailing input after policy definition");
    }
    Ok(p)
}

/// Parse a `.pol` file holding any number of policy definitions.
pub fn parse_policy_file(text: &str) -> Result<PolicyTable> {
    let mut lx = Lexer::new(text)?;
    let mut table = PolicyTable::new();
    while *lx.peek() != Tok::Eof {
        table.insert(parse_policy_block(&mut lx)?);
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Pretty-printing
// ---------------------------------------------------------------------------

/// Precedence levels: 0 parallel, 1 choice, 2 sequential/atomic.
fn fmt_level(t: &Term, f: &mut fmt::Formatter<'_>, level: u8) -> fmt::Result {
    match t {
        Term::Par(l, r) => {
            if level > 0 {
                write!(f, "(")?;
            }
            fmt_level(l, f, 0)?;
            write!(f, " | ")?;
            fmt_level(r, f, 1)?;
            if level > 0 {
                write!(f, ")")?;
            }
            Ok(())
        }
        Term::Choice(l, r) => {
            if level > 1 {
                write!(f, "(")?;
            }
            fmt_level(l, f, 1)?;
            write!(f, " + ")?;
            fmt_level(r, f, 2)?;
            if level > 1 {
                write!(f, ")")?;
            }
            Ok(())
        }
        Term::Nil => write!(f, "0"),
        Term::Prefix(p, k) => {
            match p {
                Prefix::Input(x, w) if w.kind == NameKind::ResourceVar => {
                    write!(f, "{}?(#{})", x.display(), w.display())?;
                }
                other => other.fmt_display(f)?,
            }
            write!(f, ". ")?;
            fmt_level(k, f, 2)
        }
        Term::Restrict(n, b) => {
            write!(f, "new {}. ", n.display())?;
            fmt_level(b, f, 2)
        }
        Term::Replicate(b, _) => {
            write!(f, "!")?;
            fmt_level(b, f, 2)
        }
        Term::Boundary(b) => {
            write!(f, "res {}, {}, {} {{ ", b.resource, b.policy, b.state)?;
            fmt_level(&b.body, f, 0)?;
            write!(f, " }}")?;
            for e in &b.entered {
                write!(f, " @^{e}")?;
            }
            if let Some(l) = &b.label {
                write!(f, " @{l}")?;
            }
            Ok(())
        }
        Term::Request(r) => {
            write!(f, "req {} {{ ", r.resource)?;
            fmt_level(&r.body, f, 0)?;
            write!(f, " }}")?;
            if let Some(l) = &r.label {
                write!(f, " @{l}")?;
            }
            Ok(())
        }
    }
}

pub(crate) fn fmt_term(t: &Term, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    fmt_level(t, f, 0)
}

/// Deterministic text form of a term; re-parses to an alpha-equivalent term.
pub fn pretty(t: &Term) -> String {
    t.to_string()
}

fn fmt_raw(t: &RawTerm, out: &mut String, level: u8) {
    use std::fmt::Write;
    match t {
        RawTerm::Par(l, r) => {
            if level > 0 {
                out.push('(');
            }
            fmt_raw(l, out, 0);
            out.push_str(" | ");
            fmt_raw(r, out, 1);
            if level > 0 {
                out.push(')');
            }
        }
        RawTerm::Choice(l, r) => {
            if level > 1 {
                out.push('(');
            }
            fmt_raw(l, out, 1);
            out.push_str(" + ");
            fmt_raw(r, out, 2);
            if level > 1 {
                out.push(')');
            }
        }
        RawTerm::Nil => out.push('0'),
        RawTerm::Ref(n) => out.push_str(n),
        RawTerm::Prefix(p, k) => {
            match p {
                RawPrefix::Tau => out.push_str("tau"),
                RawPrefix::InputChan(x, y) => {
                    let _ = write!(out, "{x}({y})");
                }
                RawPrefix::InputRes(x, s) => {
                    let _ = write!(out, "{x}?(#{s})");
                }
                RawPrefix::Ambiguous(x, s) => {
                    let _ = write!(out, "{x}(#{s})");
                }
                RawPrefix::Output(x, RawName::Chan(v)) => {
                    let _ = write!(out, "{x}<{v}>");
                }
                RawPrefix::Output(x, RawName::Res(v)) => {
                    let _ = write!(out, "{x}<#{v}>");
                }
                RawPrefix::Access(a, r) => {
                    let _ = write!(out, "{a}(#{r})");
                }
                RawPrefix::Release(r) => {
                    let _ = write!(out, "rel(#{r})");
                }
            }
            out.push_str(". ");
            fmt_raw(k, out, 2);
        }
        RawTerm::Restrict(n, b) => {
            let _ = write!(out, "new {n}. ");
            fmt_raw(b, out, 2);
        }
        RawTerm::Replicate(b) => {
            out.push('!');
            fmt_raw(b, out, 2);
        }
        RawTerm::Boundary { resource, policy, state, label, body } => {
            let _ = write!(out, "res #{resource}, {policy}, {state} {{ ");
            fmt_raw(body, out, 0);
            out.push_str(" }");
            if let Some(l) = label {
                let _ = write!(out, " @{l}");
            }
        }
        RawTerm::Request { resource, label, body } => {
            let _ = write!(out, "req #{resource} {{ ");
            fmt_raw(body, out, 0);
            out.push_str(" }");
            if let Some(l) = label {
                let _ = write!(out, " @{l}");
            }
        }
    }
}

fn fmt_policy(p: &PolicyAutomaton, out: &mut String) {
    use std::fmt::Write;
    let _ = writeln!(out, "policy {} {{", p.name);
    let _ = writeln!(out, "  initial {};", p.state_name(p.initial_state()));
    let violating: Vec<&str> = p.violating_states().collect();
    if !violating.is_empty() {
        let _ = writeln!(out, "  violating {};", violating.join(", "));
    }
    let rule = match p.missing_rule() {
        MissingRule::Violate => "violate",
        MissingRule::Stay => "stay",
    };
    let _ = writeln!(out, "  missing {rule};");
    for (from, act, to) in p.transitions() {
        let _ = writeln!(out, "  {from} -{act}-> {to};");
    }
    out.push_str("}\n");
}

/// Canonical text form of a whole document.
pub fn pretty_document(doc: &SourceDocument) -> String {
    let mut out = String::new();
    let mut policy_names: Vec<&str> = doc.policies.names().collect();
    policy_names.sort_unstable();
    for name in policy_names {
        fmt_policy(doc.policies.get(name).expect("listed policy"), &mut out);
        out.push('\n');
    }
    for (name, body) in &doc.raw_defs {
        out.push_str("process ");
        out.push_str(name);
        out.push_str(" = ");
        fmt_raw(body, &mut out, 0);
        out.push('\n');
    }
    out.push_str("entry ");
    out.push_str(&doc.entry);
    out.push('\n');
    if !doc.script.is_empty() {
        out.push_str("script {\n");
        for ev in &doc.script {
            match &ev.kind {
                RawScriptKind::Appear { resource, policy, state } => {
                    out.push_str(&format!("  appear #{resource} {policy} {state} @{};\n", ev.at_step));
                }
                RawScriptKind::Disappear { resource } => {
                    out.push_str(&format!("  disappear #{resource} @{};\n", ev.at_step));
                }
            }
        }
        out.push_str("}\n");
    }
    out
}

/// Load a model from `.glp` text plus `.pol` texts.
pub fn load_model(glp: &str, pol_texts: &[&str]) -> Result<Model> {
    let doc = parse(glp)?;
    let mut table = PolicyTable::new();
    for t in pol_texts {
        table.merge(parse_policy_file(t)?);
    }
    doc.resolve(&table)
}

// Used by unit tests and fixtures to sanity-check name maps.
#[allow(dead_code)]
pub(crate) fn names_by_base(t: &Term) -> BTreeMap<String, Vec<Name>> {
    let mut map: BTreeMap<String, Vec<Name>> = BTreeMap::new();
    for n in ast::free_names(t) {
        map.entry(n.base.to_string()).or_default().push(n);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{alpha_eq, free_names};

    #[test]
    fn parses_request_with_access() {
        let t = parse_process("req #hammer { hard_hit(#hammer). 0 }").unwrap();
        match &*t {
            Term::Request(r) => {
                assert_eq!(r.resource, Name::resource("hammer"));
                match &*r.body {
                    Term::Prefix(Prefix::Access(a, res), k) => {
                        assert_eq!(a, &ActionName::new("hard_hit"));
                        assert_eq!(res, &Name::resource("hammer"));
                        assert!(matches!(&**k, Term::Nil));
                    }
                    other => panic!("unexpected body {other:?}"),
                }
            }
            other => panic!("unexpected term {other:?}"),
        }
    }

    #[test]
    fn parses_nil() {
        assert_eq!(parse_process("0").unwrap(), Term::nil());
    }

    #[test]
    fn parses_restriction_over_boundary() {
        let t = parse_process("new x. res #r, phi, eps { 0 }").unwrap();
        assert!(matches!(&*t, Term::Restrict(_, _)));
    }

    #[test]
    fn rejects_restriction_over_resource() {
        let err = parse_process("new #r. 0").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("restriction is not applied"));
    }

    #[test]
    fn reports_position_on_error() {
        let err = parse("process P = req #r {\n  0\n!!\nentry P").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn rejects_duplicate_process_names() {
        let err = parse("process P = 0\nprocess P = 0\nentry P").unwrap_err();
        assert!(matches!(err, Error::DuplicateProcess(_)));
    }

    #[test]
    fn channel_evidence_resolves_resource_input() {
        let doc = parse(
            "process W = !x(#s). req #s { hard_hit(#s). 0 }\n\
             process J = x<#hammer>. 0\n\
             process Main = W | J\n\
             entry Main",
        )
        .unwrap();
        // x carries output evidence, so x(#s) is an input and hard_hit an access
        let mut inputs = 0;
        let mut accesses = 0;
        fn walk(t: &Term, inputs: &mut u32, accesses: &mut u32) {
            match t {
                Term::Prefix(Prefix::Input(_, w), k) => {
                    if w.kind == NameKind::ResourceVar {
                        *inputs += 1;
                    }
                    walk(k, inputs, accesses);
                }
                Term::Prefix(Prefix::Access(_, _), k) => {
                    *accesses += 1;
                    walk(k, inputs, accesses);
                }
                Term::Prefix(_, k) => walk(k, inputs, accesses),
                Term::Par(l, r) | Term::Choice(l, r) => {
                    walk(l, inputs, accesses);
                    walk(r, inputs, accesses);
                }
                Term::Restrict(_, b) | Term::Replicate(b, _) => walk(b, inputs, accesses),
                Term::Boundary(b) => walk(&b.body, inputs, accesses),
                Term::Request(r) => walk(&r.body, inputs, accesses),
                Term::Nil => {}
            }
        }
        walk(&doc.term, &mut inputs, &mut accesses);
        assert_eq!((inputs, accesses), (1, 1));
    }

    #[test]
    fn binder_scopes_resolve_to_sites() {
        let t = parse_process("x?(#s). req #s { 0 }").unwrap();
        if let Term::Prefix(Prefix::Input(_, s), k) = &*t {
            assert!(s.site > 0);
            if let Term::Request(r) = &**k {
                assert_eq!(&r.resource, s);
            } else {
                panic!("expected request");
            }
        } else {
            panic!("expected input");
        }
        assert_eq!(free_names(&t).len(), 1); // just x
    }

    #[test]
    fn round_trips_fixture_style_term() {
        let src = "res #hammer, phi_h, eps { 0 } @c1 | !y?(#t). req #t { soft_hit(#t). 0 } @cm";
        let t = parse_process(src).unwrap();
        let printed = pretty(&t);
        let back = parse_process(&printed).unwrap();
        assert!(alpha_eq(&t, &back), "{printed}");
    }

    #[test]
    fn pretty_nil() {
        assert_eq!(pretty(&Term::Nil), "0");
    }

    #[test]
    fn pretty_keeps_labels() {
        let t = parse_process("req #r { 0 } @chi").unwrap();
        assert!(pretty(&t).contains("@chi"));
    }

    #[test]
    fn unresolved_policy_is_reported_at_resolve() {
        let doc = parse("process P = res #r, nosuch, eps { 0 }\nentry P").unwrap();
        let err = doc.resolve(&PolicyTable::new()).unwrap_err();
        assert!(matches!(err, Error::UnknownPolicy(_)));
    }

    #[test]
    fn parses_mallet_policy() {
        let p = parse_policy("policy phi_m { initial m0; missing violate; m0 -soft_hit-> m0; }").unwrap();
        assert!(p.admits(&Trace::from_actions(&["soft_hit", "soft_hit"])));
        assert!(!p.admits(&Trace::from_actions(&["hard_hit"])));
    }

    #[test]
    fn empty_policy_with_stay_accepts_everything() {
        let p = parse_policy("policy top { initial q; missing stay; }").unwrap();
        assert!(p.admits(&Trace::from_actions(&["a", "b", "c", "a"])));
    }

    #[test]
    fn parses_grid_policy_shape() {
        let text = "policy phi2 { initial p3; violating p5; missing violate;\n\
                    p4 -E-> p7; p7 -W-> p4; p4 -S-> p3; p3 -N-> p4;\n\
                    p4 -N-> p5; p7 -N-> p8; p6 -E-> p3; p7 -S-> p6; }";
        let p = parse_policy(text).unwrap();
        assert_eq!(p.state_count(), 6);
        let viol: Vec<&str> = p.violating_states().collect();
        assert_eq!(viol, vec!["p5"]);
        assert!(!p.admits(&Trace::from_actions(&["N", "N"])));
        assert!(p.admits(&Trace::from_actions(&["N", "E"])));
    }

    #[test]
    fn rejects_nondeterministic_policy_file() {
        let err = parse_policy("policy p { initial a; a -x-> b; a -x-> c; }").unwrap_err();
        assert!(matches!(err, Error::NondeterministicPolicy { .. }));
    }

    #[test]
    fn script_steps_must_increase() {
        let doc = parse(
            "process P = 0\nentry P\nscript { appear #r phi_h eps @2; disappear #r @1; }",
        )
        .unwrap();
        let mut table = PolicyTable::new();
        table.insert(parse_policy("policy phi_h { initial h; missing stay; }").unwrap());
        assert!(matches!(doc.resolve(&table), Err(Error::ScriptOrder)));
    }

    #[test]
    fn document_pretty_is_idempotent() {
        let src = "policy phi { initial q; missing stay; }\n\
                   process Tools = res #r, phi, eps { 0 } @c1\n\
                   process Main = Tools | req #r { go(#r). 0 } @w\n\
                   entry Main";
        let doc = parse(src).unwrap();
        let once = pretty_document(&doc);
        let doc2 = parse(&once).unwrap();
        let twice = pretty_document(&doc2);
        assert_eq!(once, twice);
    }
}
