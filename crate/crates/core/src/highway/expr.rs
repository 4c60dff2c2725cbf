//! The expression language used by FILTER and DERIVE steps.
//!
//! ```text
//! expr     := or_expr
//! or_expr  := and_expr ('or' and_expr)*
//! and_expr := not_expr ('and' not_expr)*
//! not_expr := ['not'] cmp
//! cmp      := add (('=='|'!='|'<'|'<='|'>'|'>=') add)?
//! add      := mul (('+'|'-'|'||') mul)*
//! mul      := unary (('*'|'/'|'%') unary)*
//! unary    := ['-'] atom
//! atom     := number | "text" | true | false | null | field | fn '(' args ')' | '(' expr ')'
//! ```
//!
//! Nulls poison arithmetic, comparison and concatenation; `and`/`or` use
//! three-valued logic; division or modulo by zero yields null.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use regex::Regex;

use crate::error::{Error, Result};
use crate::metastore::FieldDef;
use crate::value::{Value, ValueType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Or,
    And,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Add,
    Sub,
    Concat,
    Mul,
    Div,
    Mod,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Or => "or",
            BinOp::And => "and",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Concat => "||",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Mod => "%",
        }
    }

    fn is_comparison(self) -> bool {
        matches!(self, BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Lower,
    Upper,
    Substr,
    Coalesce,
    Cast,
    ExtractRe,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "lower" => Func::Lower,
            "upper" => Func::Upper,
            "substr" => Func::Substr,
            "coalesce" => Func::Coalesce,
            "cast" => Func::Cast,
            "extract_re" => Func::ExtractRe,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Lower => "lower",
            Func::Upper => "upper",
            Func::Substr => "substr",
            Func::Coalesce => "coalesce",
            Func::Cast => "cast",
            Func::ExtractRe => "extract_re",
        }
    }
}

/// Regex compiled once at parse time when the pattern is a literal.
#[derive(Debug, Clone)]
pub struct Pattern(pub Arc<Regex>);

impl PartialEq for Pattern {
    fn eq(&self, other: &Self) -> bool {
        self.0.as_str() == other.0.as_str()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(Value),
    Field(String),
    Neg(Box<Expr>),
    Not(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>, Option<Pattern>),
}

// ---------------------------------------------------------------------------
// lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(String),
    Str(String),
    Ident(String),
    Sym(&'static str),
}

fn lex(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' {
                i += 1;
                if i >= chars.len() || !chars[i].is_ascii_digit() {
                    return Err(Error::Parse(format!("malformed number at offset {start}")));
                }
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            out.push(Tok::Num(chars[start..i].iter().collect()));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
            continue;
        }
        if c == '"' {
            i += 1;
            let mut s = String::new();
            loop {
                match chars.get(i) {
                    None => return Err(Error::Parse("unterminated text literal".into())),
                    Some('"') => {
                        i += 1;
                        break;
                    }
                    Some('\\') => {
                        match chars.get(i + 1) {
                            Some('"') => s.push('"'),
                            Some('\\') => s.push('\\'),
                            Some('n') => s.push('\n'),
                            Some('t') => s.push('\t'),
                            Some(other) => {
                                // unknown escapes are kept verbatim so regex classes like \d survive
                                s.push('\\');
                                s.push(*other);
                            }
                            None => return Err(Error::Parse("unterminated text literal".into())),
                        }
                        i += 2;
                    }
                    Some(ch) => {
                        s.push(*ch);
                        i += 1;
                    }
                }
            }
            out.push(Tok::Str(s));
            continue;
        }
        let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
        let sym2 = match two.as_str() {
            "==" => Some("=="),
            "!=" => Some("!="),
            "<=" => Some("<="),
            ">=" => Some(">="),
            "||" => Some("||"),
            _ => None,
        };
        if let Some(s) = sym2 {
            out.push(Tok::Sym(s));
            i += 2;
            continue;
        }
        let sym1 = match c {
            '<' => "<",
            '>' => ">",
            '+' => "+",
            '-' => "-",
            '*' => "*",
            '/' => "/",
            '%' => "%",
            '(' => "(",
            ')' => ")",
            ',' => ",",
            _ => return Err(Error::Parse(format!("unexpected character {c:?} at offset {i}"))),
        };
        out.push(Tok::Sym(sym1));
        i += 1;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// parser

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

const KEYWORDS: &[&str] = &["and", "or", "not", "true", "false", "null"];

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn peek_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Tok::Sym(x)) if *x == s)
    }

    fn peek_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(x)) if x == kw)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect_sym(&mut self, s: &str) -> Result<()> {
        if self.peek_sym(s) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Parse(format!("expected {s:?} at token {}", self.pos)))
        }
    }

    fn or_expr(&mut self) -> Result<Expr> {
        let mut lhs = self.and_expr()?;
        while self.peek_kw("or") {
            self.pos += 1;
            let rhs = self.and_expr()?;
            lhs = Expr::Binary(BinOp::Or, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr> {
        let mut lhs = self.not_expr()?;
        while self.peek_kw("and") {
            self.pos += 1;
            let rhs = self.not_expr()?;
            lhs = Expr::Binary(BinOp::And, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn not_expr(&mut self) -> Result<Expr> {
        if self.peek_kw("not") {
            self.pos += 1;
            return Ok(Expr::Not(Box::new(self.cmp()?)));
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<Expr> {
        let lhs = self.add()?;
        let op = match self.peek() {
            Some(Tok::Sym("==")) => BinOp::Eq,
            Some(Tok::Sym("!=")) => BinOp::Ne,
            Some(Tok::Sym("<")) => BinOp::Lt,
            Some(Tok::Sym("<=")) => BinOp::Le,
            Some(Tok::Sym(">")) => BinOp::Gt,
            Some(Tok::Sym(">=")) => BinOp::Ge,
            _ => return Ok(lhs),
        };
        self.pos += 1;
        let rhs = self.add()?;
        Ok(Expr::Binary(op, Box::new(lhs), Box::new(rhs)))
    }

    fn add(&mut self) -> Result<Expr> {
        let mut lhs = self.mul()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Sym("+")) => BinOp::Add,
                Some(Tok::Sym("-")) => BinOp::Sub,
                Some(Tok::Sym("||")) => BinOp::Concat,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.mul()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn mul(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Sym("*")) => BinOp::Mul,
                Some(Tok::Sym("/")) => BinOp::Div,
                Some(Tok::Sym("%")) => BinOp::Mod,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek_sym("-") {
            self.pos += 1;
            let inner = self.atom()?;
            // fold negative numeric literals so printing round-trips
            return Ok(match inner {
                Expr::Lit(Value::Int(i)) => Expr::Lit(Value::Int(-i)),
                Expr::Lit(Value::Dec(d)) => Expr::Lit(Value::Dec(-d)),
                other => Expr::Neg(Box::new(other)),
            });
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.bump() {
            Some(Tok::Num(n)) => {
                if n.contains('.') {
                    n.parse::<f64>()
                        .map(|d| Expr::Lit(Value::Dec(d)))
                        .map_err(|_| Error::Parse(format!("bad number {n}")))
                } else {
                    n.parse::<i64>()
                        .map(|i| Expr::Lit(Value::Int(i)))
                        .map_err(|_| Error::Parse(format!("integer literal {n} out of range")))
                }
            }
            Some(Tok::Str(s)) => Ok(Expr::Lit(Value::Text(s))),
            Some(Tok::Sym("(")) => {
                let e = self.or_expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Some(Tok::Ident(id)) => match id.as_str() {
                "true" => Ok(Expr::Lit(Value::Bool(true))),
                "false" => Ok(Expr::Lit(Value::Bool(false))),
                "null" => Ok(Expr::Lit(Value::Null)),
                kw if KEYWORDS.contains(&kw) => {
                    Err(Error::Parse(format!("unexpected keyword {kw:?}")))
                }
                _ if self.peek_sym("(") => {
                    let func = Func::from_name(&id)
                        .ok_or_else(|| Error::Parse(format!("unknown function {id:?}")))?;
                    self.pos += 1;
                    let mut args = Vec::new();
                    if !self.peek_sym(")") {
                        loop {
                            args.push(self.or_expr()?);
                            if self.peek_sym(",") {
                                self.pos += 1;
                            } else {
                                break;
                            }
                        }
                    }
                    self.expect_sym(")")?;
                    make_call(func, args)
                }
                _ => Ok(Expr::Field(id)),
            },
            Some(t) => Err(Error::Parse(format!("unexpected token {t:?}"))),
            None => Err(Error::Parse("unexpected end of expression".into())),
        }
    }
}

fn make_call(func: Func, args: Vec<Expr>) -> Result<Expr> {
    let arity_ok = match func {
        Func::Lower | Func::Upper => args.len() == 1,
        Func::Substr | Func::ExtractRe => args.len() == 3,
        Func::Cast => args.len() == 2,
        Func::Coalesce => !args.is_empty(),
    };
    if !arity_ok {
        return Err(Error::Parse(format!(
            "wrong number of arguments ({}) for {}",
            args.len(),
            func.name()
        )));
    }
    if func == Func::Cast {
        match &args[1] {
            Expr::Lit(Value::Text(t)) => {
                t.parse::<ValueType>()?;
            }
            _ => return Err(Error::Parse("cast target must be a type name literal".into())),
        }
    }
    let pattern = match (func, args.get(1)) {
        (Func::ExtractRe, Some(Expr::Lit(Value::Text(p)))) => Some(Pattern(Arc::new(
            Regex::new(p).map_err(|e| Error::Parse(format!("invalid regex: {e}")))?,
        ))),
        _ => None,
    };
    Ok(Expr::Call(func, args, pattern))
}

pub fn parse(src: &str) -> Result<Expr> {
    let mut p = Parser { toks: lex(src)?, pos: 0 };
    let e = p.or_expr()?;
    if p.pos != p.toks.len() {
        return Err(Error::Parse(format!("trailing input at token {}", p.pos)));
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// analysis

impl Expr {
    /// Field names referenced anywhere in the expression.
    pub fn fields(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_fields(&mut out);
        out
    }

    fn collect_fields(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Lit(_) => {}
            Expr::Field(f) => {
                out.insert(f.clone());
            }
            Expr::Neg(e) | Expr::Not(e) => e.collect_fields(out),
            Expr::Binary(_, a, b) => {
                a.collect_fields(out);
                b.collect_fields(out);
            }
            Expr::Call(_, args, _) => args.iter().for_each(|a| a.collect_fields(out)),
        }
    }

    /// Returns a copy with field references renamed.
    pub fn rename_fields(&self, rename: &dyn Fn(&str) -> Option<String>) -> Expr {
        match self {
            Expr::Lit(v) => Expr::Lit(v.clone()),
            Expr::Field(f) => Expr::Field(rename(f).unwrap_or_else(|| f.clone())),
            Expr::Neg(e) => Expr::Neg(Box::new(e.rename_fields(rename))),
            Expr::Not(e) => Expr::Not(Box::new(e.rename_fields(rename))),
            Expr::Binary(op, a, b) => Expr::Binary(
                *op,
                Box::new(a.rename_fields(rename)),
                Box::new(b.rename_fields(rename)),
            ),
            Expr::Call(f, args, p) => Expr::Call(
                *f,
                args.iter().map(|a| a.rename_fields(rename)).collect(),
                p.clone(),
            ),
        }
    }
}

/// Static type of an expression. `value_type` is `None` only for the bare
/// `null` literal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExprType {
    pub value_type: Option<ValueType>,
    pub nullable: bool,
}

impl ExprType {
    fn of(ty: ValueType, nullable: bool) -> Self {
        ExprType { value_type: Some(ty), nullable }
    }
}

fn comparable(a: ValueType, b: ValueType) -> bool {
    a == b
        || (a.is_numeric() && b.is_numeric())
        || matches!(
            (a, b),
            (ValueType::Text, ValueType::Timestamp) | (ValueType::Timestamp, ValueType::Text)
        )
}

fn require(
    t: ExprType,
    ok: impl Fn(ValueType) -> bool,
    what: &str,
) -> Result<()> {
    match t.value_type {
        None => Ok(()),
        Some(ty) if ok(ty) => Ok(()),
        Some(ty) => Err(Error::Type(format!("{what} expected, found {ty}"))),
    }
}

/// Infers the static type of `expr` against `fields`.
pub fn infer_type(expr: &Expr, fields: &[FieldDef]) -> Result<ExprType> {
    match expr {
        Expr::Lit(v) => Ok(ExprType { value_type: v.value_type(), nullable: v.is_null() }),
        Expr::Field(name) => fields
            .iter()
            .find(|f| &f.name == name)
            .map(|f| ExprType::of(f.value_type, f.nullable))
            .ok_or_else(|| Error::SchemaMismatch(format!("unknown field {name:?}"))),
        Expr::Neg(e) => {
            let t = infer_type(e, fields)?;
            require(t, ValueType::is_numeric, "number")?;
            Ok(t)
        }
        Expr::Not(e) => {
            let t = infer_type(e, fields)?;
            require(t, |ty| ty == ValueType::Boolean, "boolean")?;
            Ok(ExprType::of(ValueType::Boolean, t.nullable))
        }
        Expr::Binary(op, a, b) => {
            let ta = infer_type(a, fields)?;
            let tb = infer_type(b, fields)?;
            let nullable = ta.nullable || tb.nullable;
            match op {
                BinOp::And | BinOp::Or => {
                    require(ta, |t| t == ValueType::Boolean, "boolean")?;
                    require(tb, |t| t == ValueType::Boolean, "boolean")?;
                    Ok(ExprType::of(ValueType::Boolean, nullable))
                }
                op if op.is_comparison() => {
                    if let (Some(x), Some(y)) = (ta.value_type, tb.value_type) {
                        if !comparable(x, y) {
                            return Err(Error::Type(format!("cannot compare {x} with {y}")));
                        }
                    }
                    Ok(ExprType::of(ValueType::Boolean, nullable))
                }
                BinOp::Concat => Ok(ExprType::of(ValueType::Text, nullable)),
                BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div | BinOp::Mod => {
                    require(ta, ValueType::is_numeric, "number")?;
                    require(tb, ValueType::is_numeric, "number")?;
                    let both_int = ta.value_type != Some(ValueType::Decimal)
                        && tb.value_type != Some(ValueType::Decimal);
                    let ty = match op {
                        BinOp::Div => ValueType::Decimal,
                        _ if both_int => ValueType::Integer,
                        _ => ValueType::Decimal,
                    };
                    let nullable = nullable || matches!(op, BinOp::Div | BinOp::Mod);
                    Ok(ExprType::of(ty, nullable))
                }
                _ => unreachable!("all binary operators handled"),
            }
        }
        Expr::Call(func, args, _) => {
            let ts = args
                .iter()
                .map(|a| infer_type(a, fields))
                .collect::<Result<Vec<_>>>()?;
            let any_nullable = ts.iter().any(|t| t.nullable);
            let texty = |t: ValueType| matches!(t, ValueType::Text | ValueType::Timestamp);
            match func {
                Func::Lower | Func::Upper => {
                    require(ts[0], texty, "text")?;
                    Ok(ExprType::of(ValueType::Text, any_nullable))
                }
                Func::Substr => {
                    require(ts[0], texty, "text")?;
                    require(ts[1], |t| t == ValueType::Integer, "integer")?;
                    require(ts[2], |t| t == ValueType::Integer, "integer")?;
                    Ok(ExprType::of(ValueType::Text, any_nullable))
                }
                Func::Coalesce => {
                    let mut ty: Option<ValueType> = None;
                    for t in &ts {
                        if let (Some(acc), Some(next)) = (ty, t.value_type) {
                            let ok = acc == next || (acc.is_numeric() && next.is_numeric());
                            if !ok {
                                return Err(Error::Type(format!(
                                    "coalesce mixes {acc} and {next}"
                                )));
                            }
                        }
                        ty = ValueType::lub_opt(ty, t.value_type);
                    }
                    Ok(ExprType { value_type: ty, nullable: ts.iter().all(|t| t.nullable) })
                }
                Func::Cast => {
                    let Expr::Lit(Value::Text(name)) = &args[1] else {
                        return Err(Error::Parse("cast target must be a type name".into()));
                    };
                    let target: ValueType = name.parse()?;
                    let lossless = ts[0]
                        .value_type
                        .is_some_and(|t| t.widens_to(target) || t == ValueType::Text && target == ValueType::Text);
                    let nullable = match &args[0] {
                        Expr::Lit(v) => v.cast_to(target).is_null(),
                        _ => ts[0].nullable || !lossless,
                    };
                    Ok(ExprType::of(target, nullable))
                }
                Func::ExtractRe => {
                    require(ts[0], texty, "text")?;
                    require(ts[1], |t| t == ValueType::Text, "text")?;
                    require(ts[2], |t| t == ValueType::Integer, "integer")?;
                    Ok(ExprType::of(ValueType::Text, true))
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// evaluation

/// Field lookup used during evaluation.
pub trait RecordView {
    fn get(&self, field: &str) -> Option<&Value>;
}

impl RecordView for std::collections::BTreeMap<String, Value> {
    fn get(&self, field: &str) -> Option<&Value> {
        std::collections::BTreeMap::get(self, field)
    }
}

/// A positional row viewed through its schema.
pub struct RowView<'a> {
    pub fields: &'a [FieldDef],
    pub row: &'a [Value],
}

impl RecordView for RowView<'_> {
    fn get(&self, field: &str) -> Option<&Value> {
        self.fields.iter().position(|f| f.name == field).map(|i| &self.row[i])
    }
}

fn numeric_pair(a: &Value, b: &Value) -> Result<(f64, f64, bool)> {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => Ok((*x as f64, *y as f64, true)),
        (x, y) => match (x.as_f64(), y.as_f64()) {
            (Some(p), Some(q)) => Ok((p, q, false)),
            _ => Err(Error::Type(format!("arithmetic on non-numeric values {x} and {y}"))),
        },
    }
}

fn compare(op: BinOp, a: &Value, b: &Value) -> Result<Value> {
    use std::cmp::Ordering;
    let ord: Ordering = match (a, b) {
        (Value::Int(x), Value::Int(y)) => x.cmp(y),
        (Value::Bool(x), Value::Bool(y)) => x.cmp(y),
        (Value::Text(x) | Value::Timestamp(x), Value::Text(y) | Value::Timestamp(y)) => x.cmp(y),
        (x, y) => match (x.as_f64(), y.as_f64()) {
            (Some(p), Some(q)) => p.partial_cmp(&q).unwrap_or(Ordering::Equal),
            _ => return Err(Error::Type(format!("cannot compare {x} with {y}"))),
        },
    };
    Ok(Value::Bool(match op {
        BinOp::Eq => ord == Ordering::Equal,
        BinOp::Ne => ord != Ordering::Equal,
        BinOp::Lt => ord == Ordering::Less,
        BinOp::Le => ord != Ordering::Greater,
        BinOp::Gt => ord == Ordering::Greater,
        BinOp::Ge => ord != Ordering::Less,
        _ => unreachable!(),
    }))
}

fn as_bool(v: &Value) -> Result<Option<bool>> {
    match v {
        Value::Null => Ok(None),
        Value::Bool(b) => Ok(Some(*b)),
        other => Err(Error::Type(format!("boolean expected, found {other}"))),
    }
}

fn as_text(v: &Value) -> Result<&str> {
    match v {
        Value::Text(t) | Value::Timestamp(t) => Ok(t),
        other => Err(Error::Type(format!("text expected, found {other}"))),
    }
}

fn as_int(v: &Value) -> Result<i64> {
    match v {
        Value::Int(i) => Ok(*i),
        other => Err(Error::Type(format!("integer expected, found {other}"))),
    }
}

fn substr(t: &str, start: i64, len: i64) -> Result<String> {
    if len < 0 {
        return Err(Error::Type("substr length must be non-negative".into()));
    }
    let end = start.saturating_add(len);
    let from = start.max(1);
    if end <= from {
        return Ok(String::new());
    }
    Ok(t.chars()
        .skip((from - 1) as usize)
        .take((end - from) as usize)
        .collect())
}

fn extract(t: &str, re: &Regex, group: i64) -> Value {
    if group < 0 {
        return Value::Null;
    }
    re.captures(t)
        .and_then(|c| c.get(group as usize))
        .map(|m| Value::Text(m.as_str().to_string()))
        .unwrap_or(Value::Null)
}

/// Evaluates a parsed expression against one record.
pub fn eval(expr: &Expr, rec: &dyn RecordView) -> Result<Value> {
    match expr {
        Expr::Lit(v) => Ok(v.clone()),
        Expr::Field(name) => rec
            .get(name)
            .cloned()
            .ok_or_else(|| Error::SchemaMismatch(format!("unknown field {name:?}"))),
        Expr::Neg(e) => match eval(e, rec)? {
            Value::Null => Ok(Value::Null),
            Value::Int(i) => i
                .checked_neg()
                .map(Value::Int)
                .ok_or_else(|| Error::Type("integer overflow".into())),
            Value::Dec(d) => Ok(Value::Dec(-d)),
            other => Err(Error::Type(format!("cannot negate {other}"))),
        },
        Expr::Not(e) => Ok(match as_bool(&eval(e, rec)?)? {
            None => Value::Null,
            Some(b) => Value::Bool(!b),
        }),
        Expr::Binary(BinOp::And, a, b) => {
            let x = as_bool(&eval(a, rec)?)?;
            let y = as_bool(&eval(b, rec)?)?;
            Ok(match (x, y) {
                (Some(false), _) | (_, Some(false)) => Value::Bool(false),
                (Some(true), Some(true)) => Value::Bool(true),
                _ => Value::Null,
            })
        }
        Expr::Binary(BinOp::Or, a, b) => {
            let x = as_bool(&eval(a, rec)?)?;
            let y = as_bool(&eval(b, rec)?)?;
            Ok(match (x, y) {
                (Some(true), _) | (_, Some(true)) => Value::Bool(true),
                (Some(false), Some(false)) => Value::Bool(false),
                _ => Value::Null,
            })
        }
        Expr::Binary(op, a, b) => {
            let x = eval(a, rec)?;
            let y = eval(b, rec)?;
            if x.is_null() || y.is_null() {
                // still reject statically impossible combinations like 1 + "x"
                if !op.is_comparison() && *op != BinOp::Concat {
                    for v in [&x, &y] {
                        if !v.is_null() && v.as_f64().is_none() {
                            return Err(Error::Type(format!("arithmetic on non-numeric value {v}")));
                        }
                    }
                }
                return Ok(Value::Null);
            }
            if op.is_comparison() {
                return compare(*op, &x, &y);
            }
            if *op == BinOp::Concat {
                return Ok(Value::Text(format!(
                    "{}{}",
                    x.render().unwrap_or_default(),
                    y.render().unwrap_or_default()
                )));
            }
            let (p, q, ints) = numeric_pair(&x, &y)?;
            if ints {
                let (i, j) = (as_int(&x)?, as_int(&y)?);
                let r = match op {
                    BinOp::Add => i.checked_add(j),
                    BinOp::Sub => i.checked_sub(j),
                    BinOp::Mul => i.checked_mul(j),
                    BinOp::Div => {
                        return Ok(if j == 0 { Value::Null } else { Value::Dec(p / q) });
                    }
                    BinOp::Mod => {
                        if j == 0 {
                            return Ok(Value::Null);
                        }
                        i.checked_rem(j)
                    }
                    _ => unreachable!(),
                };
                return r
                    .map(Value::Int)
                    .ok_or_else(|| Error::Type("integer overflow".into()));
            }
            Ok(match op {
                BinOp::Add => Value::Dec(p + q),
                BinOp::Sub => Value::Dec(p - q),
                BinOp::Mul => Value::Dec(p * q),
                BinOp::Div if q == 0.0 => Value::Null,
                BinOp::Div => Value::Dec(p / q),
                BinOp::Mod if q == 0.0 => Value::Null,
                BinOp::Mod => Value::Dec(p % q),
                _ => unreachable!(),
            })
        }
        Expr::Call(func, args, pattern) => {
            if *func == Func::Coalesce {
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(eval(a, rec)?);
                }
                let numeric_mix = vals.iter().any(|v| matches!(v, Value::Dec(_)));
                return Ok(match vals.into_iter().find(|v| !v.is_null()) {
                    Some(Value::Int(i)) if numeric_mix => Value::Dec(i as f64),
                    Some(v) => v,
                    None => Value::Null,
                });
            }
            let vals = args.iter().map(|a| eval(a, rec)).collect::<Result<Vec<_>>>()?;
            if *func == Func::Cast {
                let target: ValueType = as_text(&vals[1])?.parse()?;
                return Ok(vals[0].cast_to(target));
            }
            if vals.iter().any(Value::is_null) {
                return Ok(Value::Null);
            }
            match func {
                Func::Lower => Ok(Value::Text(as_text(&vals[0])?.to_lowercase())),
                Func::Upper => Ok(Value::Text(as_text(&vals[0])?.to_uppercase())),
                Func::Substr => Ok(Value::Text(substr(
                    as_text(&vals[0])?,
                    as_int(&vals[1])?,
                    as_int(&vals[2])?,
                )?)),
                Func::ExtractRe => {
                    let text = as_text(&vals[0])?;
                    let group = as_int(&vals[2])?;
                    match pattern {
                        Some(p) => Ok(extract(text, &p.0, group)),
                        None => {
                            let re = Regex::new(as_text(&vals[1])?)
                                .map_err(|e| Error::Type(format!("invalid regex: {e}")))?;
                            Ok(extract(text, &re, group))
                        }
                    }
                }
                Func::Coalesce | Func::Cast => unreachable!(),
            }
        }
    }
}

/// Parses and evaluates in one go.
pub fn evaluate_expression(src: &str, rec: &dyn RecordView) -> Result<Value> {
    eval(&parse(src)?, rec)
}

/// Predicate semantics for FILTER: null counts as false.
pub fn eval_predicate(expr: &Expr, rec: &dyn RecordView) -> Result<bool> {
    Ok(as_bool(&eval(expr, rec)?)?.unwrap_or(false))
}

// ---------------------------------------------------------------------------
// printing

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(Value::Null) => f.write_str("null"),
            Expr::Lit(Value::Bool(b)) => write!(f, "{b}"),
            Expr::Lit(Value::Int(i)) if *i < 0 => write!(f, "({i})"),
            Expr::Lit(Value::Int(i)) => write!(f, "{i}"),
            Expr::Lit(Value::Dec(d)) => {
                let s = crate::value::format_decimal(*d);
                if *d < 0.0 {
                    write!(f, "({s})")
                } else {
                    f.write_str(&s)
                }
            }
            Expr::Lit(Value::Text(t) | Value::Timestamp(t)) => f.write_str(&quote(t)),
            Expr::Field(name) => f.write_str(name),
            Expr::Neg(e) => write!(f, "-({e})"),
            Expr::Not(e) => write!(f, "not ({e})"),
            Expr::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args, _) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    fn rec(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn ev(src: &str, r: &BTreeMap<String, Value>) -> Result<Value> {
        evaluate_expression(src, r)
    }

    #[test]
    fn precedence() {
        let r = rec(&[]);
        assert_eq!(ev("1 + 2 * 3", &r).unwrap(), Value::Int(7));
        assert_eq!(ev("(1 + 2) * 3", &r).unwrap(), Value::Int(9));
        assert_eq!(ev("10 - 4 - 3", &r).unwrap(), Value::Int(3));
        assert_eq!(ev("-2 * 3", &r).unwrap(), Value::Int(-6));
        assert_eq!(ev("1 < 2 and not 3 > 4 or false", &r).unwrap(), Value::Bool(true));
    }

    #[test]
    fn coalesce_and_substr() {
        let r = rec(&[("b", Value::Null)]);
        assert_eq!(ev("coalesce(b, 5)", &r).unwrap(), Value::Int(5));
        assert_eq!(ev(r#"substr("warehouse", 1, 4)"#, &r).unwrap(), Value::Text("ware".into()));
        assert_eq!(ev(r#"substr("warehouse", 5, 100)"#, &r).unwrap(), Value::Text("house".into()));
        assert_eq!(ev(r#"substr("abc", 0, 2)"#, &r).unwrap(), Value::Text("a".into()));
    }

    #[test]
    fn integer_division_yields_decimal_and_zero_division_is_null() {
        let r = rec(&[]);
        assert_eq!(ev("7 / 2", &r).unwrap(), Value::Dec(3.5));
        assert_eq!(ev("7 / 0", &r).unwrap(), Value::Null);
        assert_eq!(ev("7 % 0", &r).unwrap(), Value::Null);
        assert_eq!(ev("7 % 3", &r).unwrap(), Value::Int(1));
    }

    #[test]
    fn null_poisoning() {
        let r = rec(&[("x", Value::Null), ("t", Value::Text("a".into()))]);
        assert_eq!(ev("x + 1", &r).unwrap(), Value::Null);
        assert_eq!(ev("x == 1", &r).unwrap(), Value::Null);
        assert_eq!(ev("t || x", &r).unwrap(), Value::Null);
        assert_eq!(ev("x == 1 and false", &r).unwrap(), Value::Bool(false));
        assert_eq!(ev("x == 1 or true", &r).unwrap(), Value::Bool(true));
        assert!(!eval_predicate(&parse("x == 1").unwrap(), &r).unwrap());
    }

    #[test]
    fn type_errors() {
        let r = rec(&[]);
        assert_eq!(ev(r#"1 + "x""#, &r).unwrap_err().code(), "TYPE_ERROR");
        assert_eq!(ev(r#"1 == "x""#, &r).unwrap_err().code(), "TYPE_ERROR");
        assert_eq!(ev(r#"not 1"#, &r).unwrap_err().code(), "TYPE_ERROR");
    }

    #[test]
    fn parse_errors() {
        for bad in ["1 +", "(1", "a = b", "foo(1)", "1 2", "\"open", "and"] {
            assert_eq!(parse(bad).unwrap_err().code(), "PARSE_ERROR", "{bad}");
        }
    }

    #[test]
    fn functions() {
        let r = rec(&[("t", Value::Text("score:42 ok".into()))]);
        assert_eq!(ev(r#"extract_re(t, "score:(\d+)", 1)"#, &r).unwrap(), Value::Text("42".into()));
        assert_eq!(ev(r#"extract_re("none", "score:(\d+)", 1)"#, &r).unwrap(), Value::Null);
        assert_eq!(ev(r#"upper("ab") || lower("CD")"#, &r).unwrap(), Value::Text("ABcd".into()));
        assert_eq!(ev(r#"cast("12", "INTEGER") + 1"#, &r).unwrap(), Value::Int(13));
        assert_eq!(ev(r#"cast("x", "INTEGER")"#, &r).unwrap(), Value::Null);
        assert_eq!(ev(r#"cast(3, "DECIMAL")"#, &r).unwrap(), Value::Dec(3.0));
        assert_eq!(ev(r#"1 || "a""#, &r).unwrap(), Value::Text("1a".into()));
    }

    #[test]
    fn printing_round_trips() {
        for src in [
            "1 + 2 * 3",
            "not a > -1.5 or b == \"q\\\"x\"",
            "coalesce(a, null, 2) || upper(t)",
            "extract_re(t, \"(\\d+)\", 1)",
            "-(a) % 3",
        ] {
            let e = parse(src).unwrap();
            let printed = e.to_string();
            assert_eq!(parse(&printed).unwrap(), e, "{src} -> {printed}");
        }
    }

    #[test]
    fn static_types() {
        let fields = vec![
            FieldDef::new("a", ValueType::Integer, false),
            FieldDef::new("b", ValueType::Decimal, true),
            FieldDef::new("t", ValueType::Text, false),
        ];
        let ty = |s: &str| infer_type(&parse(s).unwrap(), &fields);
        assert_eq!(ty("a * 2").unwrap(), ExprType::of(ValueType::Integer, false));
        assert_eq!(ty("a + b").unwrap(), ExprType::of(ValueType::Decimal, true));
        assert_eq!(ty("a / 2").unwrap(), ExprType::of(ValueType::Decimal, true));
        assert_eq!(ty("coalesce(b, 0)").unwrap(), ExprType::of(ValueType::Decimal, false));
        assert_eq!(ty("t || a").unwrap(), ExprType::of(ValueType::Text, false));
        assert_eq!(ty("a + t").unwrap_err().code(), "TYPE_ERROR");
        assert_eq!(ty("zz").unwrap_err().code(), "SCHEMA_MISMATCH");
    }
}
