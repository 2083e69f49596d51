//! Recursive-descent parser for the transform dialect:
//!
//! ```text
//! SELECT item [, item]*
//! FROM table [[AS] alias]
//! [[LEFT | INNER] JOIN table [[AS] alias]
//!     ON l.k = r.k [AND l.k2 = r.k2]* AND r.t BETWEEN l.t AND l.t + INTERVAL 'n' UNIT]
//! [WHERE expr]
//! [GROUP BY TUMBLE(col, INTERVAL 'n' UNIT) [, col]*]
//! ```

use std::collections::BTreeSet;
use std::fmt;

use super::ast::*;
use super::lexer::{tokenize, Pos, Tok, Token};
use crate::time::Timestamp;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub struct SyntaxError {
    pub pos: Pos,
    pub found: String,
    pub expected: BTreeSet<String>,
    pub message: Option<String>,
}

impl fmt::Display for SyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "syntax error at {}: found {:?}", self.pos, self.found)?;
        if !self.expected.is_empty() {
            let list: Vec<&str> = self.expected.iter().map(String::as_str).collect();
            write!(f, ", expected one of: {}", list.join(", "))?;
        }
        if let Some(m) = &self.message {
            write!(f, " ({m})")?;
        }
        Ok(())
    }
}

const RESERVED: &[&str] = &[
    "SELECT", "FROM", "AS", "LEFT", "INNER", "JOIN", "ON", "AND", "OR", "NOT", "BETWEEN", "WHERE", "GROUP", "BY",
    "TUMBLE", "INTERVAL", "TIMESTAMP", "IS", "NULL", "TRUE", "FALSE",
];

fn is_reserved(word: &str) -> bool {
    RESERVED.iter().any(|k| k.eq_ignore_ascii_case(word))
}

struct Parser {
    tokens: Vec<Token>,
    at: usize,
}

type PResult<T> = Result<T, SyntaxError>;

/// Parses query text into an unanalyzed plan.
pub fn parse(text: &str) -> Result<LogicalPlan, SyntaxError> {
    let tokens = tokenize(text).map_err(|e| SyntaxError {
        pos: e.pos,
        found: String::new(),
        expected: BTreeSet::new(),
        message: Some(e.message),
    })?;
    let mut p = Parser { tokens, at: 0 };
    let plan = p.query()?;
    if p.peek().tok == Tok::Semicolon {
        p.at += 1;
    }
    if p.peek().tok != Tok::Eof {
        return Err(p.unexpected(&["end of input"]));
    }
    Ok(plan)
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.at]
    }

    fn peek_at(&self, n: usize) -> &Tok {
        &self.tokens[(self.at + n).min(self.tokens.len() - 1)].tok
    }

    fn advance(&mut self) -> Token {
        let t = self.tokens[self.at].clone();
        if t.tok != Tok::Eof {
            self.at += 1;
        }
        t
    }

    fn unexpected(&self, expected: &[&str]) -> SyntaxError {
        let t = self.peek();
        SyntaxError {
            pos: t.pos,
            found: t.tok.describe(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            message: None,
        }
    }

    fn error_at(&self, pos: Pos, message: &str) -> SyntaxError {
        SyntaxError { pos, found: String::new(), expected: BTreeSet::new(), message: Some(message.to_string()) }
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.peek().tok.is_kw(kw) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> PResult<()> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.unexpected(&[kw]))
        }
    }

    fn expect(&mut self, tok: Tok) -> PResult<()> {
        if self.peek().tok == tok {
            self.at += 1;
            Ok(())
        } else {
            Err(self.unexpected(&[&tok.describe()]))
        }
    }

    fn ident(&mut self, what: &str) -> PResult<String> {
        match &self.peek().tok {
            Tok::Ident(s) if !is_reserved(s) => {
                let s = s.clone();
                self.at += 1;
                Ok(s)
            }
            _ => Err(self.unexpected(&[what])),
        }
    }

    fn query(&mut self) -> PResult<LogicalPlan> {
        self.expect_kw("SELECT")?;
        let mut items = vec![self.select_item()?];
        while self.peek().tok == Tok::Comma {
            self.at += 1;
            items.push(self.select_item()?);
        }
        self.expect_kw("FROM")?;
        let mut plan = self.table()?;

        let join_kind = if self.peek().tok.is_kw("LEFT") {
            self.at += 1;
            self.expect_kw("JOIN")?;
            Some(JoinKind::Left)
        } else if self.peek().tok.is_kw("INNER") {
            self.at += 1;
            self.expect_kw("JOIN")?;
            Some(JoinKind::Inner)
        } else if self.eat_kw("JOIN") {
            Some(JoinKind::Inner)
        } else {
            None
        };
        if let Some(kind) = join_kind {
            let right = self.table()?;
            self.expect_kw("ON")?;
            let on_pos = self.peek().pos;
            let on = self.expr()?;
            plan = self.interval_join(plan, right, kind, on, on_pos)?;
        }

        if self.eat_kw("WHERE") {
            let predicate = self.expr()?;
            plan = LogicalPlan::Filter { input: Box::new(plan), predicate };
        }

        if self.eat_kw("GROUP") {
            self.expect_kw("BY")?;
            self.expect_kw("TUMBLE")?;
            self.expect(Tok::LParen)?;
            let time_column = self.column_ref()?;
            self.expect(Tok::Comma)?;
            let window = self.interval()?;
            self.expect(Tok::RParen)?;
            let mut group_by = Vec::new();
            while self.peek().tok == Tok::Comma {
                self.at += 1;
                group_by.push(self.column_ref()?);
            }
            plan = LogicalPlan::TumbleAggregate { input: Box::new(plan), time_column, window, group_by };
        }

        Ok(LogicalPlan::Project { input: Box::new(plan), items })
    }

    fn table(&mut self) -> PResult<LogicalPlan> {
        let table = self.ident("table name")?;
        let alias = if self.eat_kw("AS") {
            self.ident("alias")?
        } else if matches!(&self.peek().tok, Tok::Ident(s) if !is_reserved(s)) {
            self.ident("alias")?
        } else {
            table.clone()
        };
        Ok(LogicalPlan::Scan { table, alias })
    }

    /// Splits the ON condition into equi-key pairs and the event-time bound.
    fn interval_join(
        &self,
        left: LogicalPlan,
        right: LogicalPlan,
        kind: JoinKind,
        on: Expr,
        on_pos: Pos,
    ) -> PResult<LogicalPlan> {
        let mut conjuncts = Vec::new();
        flatten_and(on, &mut conjuncts);
        let mut keys = Vec::new();
        let mut bound = None;
        for c in conjuncts {
            match c {
                Expr::Binary { op: BinOp::Eq, left: l, right: r } => keys.push((*l, *r)),
                Expr::Between { expr, low, high } if bound.is_none() => bound = Some((*expr, *low, *high)),
                _ => {
                    return Err(self.error_at(
                        on_pos,
                        "join condition must be equalities plus one `t BETWEEN s AND s + INTERVAL` bound",
                    ))
                }
            }
        }
        let Some((right_time, left_time, high)) = bound else {
            return Err(self.error_at(on_pos, "interval join requires a BETWEEN bound on event time"));
        };
        let upper_bound = match high {
            Expr::Binary { op: BinOp::Add, left: base, right: iv } if *base == left_time => match *iv {
                Expr::Literal(Literal::Interval(i)) => i,
                _ => return Err(self.error_at(on_pos, "BETWEEN upper bound must add an INTERVAL literal")),
            },
            _ => {
                return Err(self.error_at(
                    on_pos,
                    "BETWEEN upper bound must be the lower bound plus an INTERVAL literal",
                ))
            }
        };
        if keys.is_empty() {
            return Err(self.error_at(on_pos, "interval join requires at least one equality key"));
        }
        Ok(LogicalPlan::IntervalJoin {
            left: Box::new(left),
            right: Box::new(right),
            kind,
            keys,
            left_time,
            right_time,
            upper_bound,
        })
    }

    fn select_item(&mut self) -> PResult<SelectItem> {
        let expr = self.expr()?;
        let alias = if self.eat_kw("AS") { Some(self.ident("alias")?) } else { None };
        Ok(SelectItem { expr, alias })
    }

    fn column_ref(&mut self) -> PResult<Expr> {
        let first = self.ident("column")?;
        if self.peek().tok == Tok::Dot {
            self.at += 1;
            let name = self.ident("column")?;
            Ok(Expr::Column { qualifier: Some(first), name })
        } else {
            Ok(Expr::Column { qualifier: None, name: first })
        }
    }

    fn interval(&mut self) -> PResult<Interval> {
        self.expect_kw("INTERVAL")?;
        let t = self.advance();
        let count = match &t.tok {
            Tok::Str(s) => s.trim().parse::<i64>().ok().filter(|n| *n > 0),
            Tok::Int(n) if *n > 0 => Some(*n),
            _ => None,
        }
        .ok_or_else(|| SyntaxError {
            pos: t.pos,
            found: t.tok.describe(),
            expected: ["positive interval count".to_string()].into(),
            message: None,
        })?;
        let unit = match &self.peek().tok {
            Tok::Ident(w) => IntervalUnit::parse(w),
            _ => None,
        }
        .ok_or_else(|| self.unexpected(&["SECOND", "MINUTE", "HOUR", "DAY", "WEEK"]))?;
        self.at += 1;
        let iv = Interval { count, unit };
        if iv.millis().is_none() {
            return Err(self.error_at(t.pos, "interval too large"));
        }
        Ok(iv)
    }

    fn expr(&mut self) -> PResult<Expr> {
        self.or_expr()
    }

    fn or_expr(&mut self) -> PResult<Expr> {
        let mut e = self.and_expr()?;
        while self.eat_kw("OR") {
            e = Expr::binary(BinOp::Or, e, self.and_expr()?);
        }
        Ok(e)
    }

    fn and_expr(&mut self) -> PResult<Expr> {
        let mut e = self.not_expr()?;
        while self.eat_kw("AND") {
            e = Expr::binary(BinOp::And, e, self.not_expr()?);
        }
        Ok(e)
    }

    fn not_expr(&mut self) -> PResult<Expr> {
        if self.eat_kw("NOT") {
            return Ok(Expr::Not(Box::new(self.not_expr()?)));
        }
        self.comparison()
    }

    fn comparison(&mut self) -> PResult<Expr> {
        let left = self.additive()?;
        let op = match self.peek().tok {
            Tok::Eq => Some(BinOp::Eq),
            Tok::NotEq => Some(BinOp::NotEq),
            Tok::Lt => Some(BinOp::Lt),
            Tok::LtEq => Some(BinOp::LtEq),
            Tok::Gt => Some(BinOp::Gt),
            Tok::GtEq => Some(BinOp::GtEq),
            _ => None,
        };
        if let Some(op) = op {
            self.at += 1;
            return Ok(Expr::binary(op, left, self.additive()?));
        }
        if self.eat_kw("IS") {
            let negated = self.eat_kw("NOT");
            self.expect_kw("NULL")?;
            return Ok(Expr::IsNull { expr: Box::new(left), negated });
        }
        if self.eat_kw("BETWEEN") {
            let low = self.additive()?;
            self.expect_kw("AND")?;
            let high = self.additive()?;
            return Ok(Expr::Between { expr: Box::new(left), low: Box::new(low), high: Box::new(high) });
        }
        Ok(left)
    }

    fn additive(&mut self) -> PResult<Expr> {
        let mut e = self.multiplicative()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(e),
            };
            self.at += 1;
            e = Expr::binary(op, e, self.multiplicative()?);
        }
    }

    fn multiplicative(&mut self) -> PResult<Expr> {
        let mut e = self.unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(e),
            };
            self.at += 1;
            e = Expr::binary(op, e, self.unary()?);
        }
    }

    fn unary(&mut self) -> PResult<Expr> {
        if self.peek().tok == Tok::Minus {
            self.at += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> PResult<Expr> {
        const EXPECTED: &[&str] = &["expression"];
        let t = self.peek().clone();
        match &t.tok {
            Tok::Int(i) => {
                self.at += 1;
                Ok(Expr::Literal(Literal::Int(*i)))
            }
            Tok::Float(f) => {
                self.at += 1;
                Ok(Expr::Literal(Literal::Float(*f)))
            }
            Tok::Str(s) => {
                self.at += 1;
                Ok(Expr::Literal(Literal::String(s.clone())))
            }
            Tok::LParen => {
                self.at += 1;
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(w) => {
                let upper = w.to_ascii_uppercase();
                match upper.as_str() {
                    "NULL" => {
                        self.at += 1;
                        Ok(Expr::Literal(Literal::Null))
                    }
                    "TRUE" | "FALSE" => {
                        self.at += 1;
                        Ok(Expr::Literal(Literal::Bool(upper == "TRUE")))
                    }
                    "INTERVAL" => Ok(Expr::Literal(Literal::Interval(self.interval()?))),
                    "TIMESTAMP" if matches!(self.peek_at(1), Tok::Str(_)) => {
                        self.at += 1;
                        let s = self.advance();
                        let Tok::Str(text) = &s.tok else { unreachable!() };
                        let ts = Timestamp::parse(text).map_err(|e| self.error_at(s.pos, &e.to_string()))?;
                        Ok(Expr::Literal(Literal::Timestamp(ts)))
                    }
                    _ if *self.peek_at(1) == Tok::LParen && AggFunc::parse(w).is_some() => {
                        let func = AggFunc::parse(w).expect("checked");
                        self.at += 2;
                        let arg = if func == AggFunc::Count && self.peek().tok == Tok::Star {
                            self.at += 1;
                            None
                        } else {
                            Some(Box::new(self.expr()?))
                        };
                        self.expect(Tok::RParen)?;
                        Ok(Expr::Aggregate { func, arg })
                    }
                    _ if is_reserved(w) => Err(self.unexpected(EXPECTED)),
                    _ => self.column_ref(),
                }
            }
            _ => Err(self.unexpected(EXPECTED)),
        }
    }
}

fn flatten_and(e: Expr, out: &mut Vec<Expr>) {
    match e {
        Expr::Binary { op: BinOp::And, left, right } => {
            flatten_and(*left, out);
            flatten_and(*right, out);
        }
        other => out.push(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const LATE_SHIPMENTS: &str = "SELECT o.order_time, o.order_id
FROM orders as o
LEFT JOIN shipments as s
  ON o.order_id = s.order_id
  AND s.shipment_time BETWEEN
    o.order_time AND o.order_time + INTERVAL '1' WEEK
WHERE s.shipment_id IS NULL";

    #[test]
    fn simple_projection() {
        let plan = parse("SELECT x FROM a").unwrap();
        assert_eq!(
            plan,
            LogicalPlan::Project {
                input: Box::new(LogicalPlan::Scan { table: "a".into(), alias: "a".into() }),
                items: vec![SelectItem { expr: Expr::col(None, "x"), alias: None }],
            }
        );
    }

    #[test]
    fn late_shipments_query() {
        let plan = parse(LATE_SHIPMENTS).unwrap();
        let LogicalPlan::Project { input, items } = plan else { panic!() };
        assert_eq!(items.len(), 2);
        let LogicalPlan::Filter { input, predicate } = *input else { panic!() };
        assert_eq!(
            predicate,
            Expr::IsNull { expr: Box::new(Expr::col(Some("s"), "shipment_id")), negated: false }
        );
        let LogicalPlan::IntervalJoin { kind, keys, upper_bound, left_time, right_time, .. } = *input else {
            panic!()
        };
        assert_eq!(kind, JoinKind::Left);
        assert_eq!(keys, vec![(Expr::col(Some("o"), "order_id"), Expr::col(Some("s"), "order_id"))]);
        assert_eq!(upper_bound, Interval { count: 1, unit: IntervalUnit::Week });
        assert_eq!(upper_bound.millis(), Some(7 * 24 * 3600 * 1000));
        assert_eq!(left_time, Expr::col(Some("o"), "order_time"));
        assert_eq!(right_time, Expr::col(Some("s"), "shipment_time"));
    }

    #[test]
    fn missing_select_list() {
        let err = parse("SELECT FROM a").unwrap_err();
        assert_eq!(err.pos, Pos { line: 1, column: 8 });
        assert_eq!(err.found, "FROM");
        assert!(err.expected.contains("expression"));
    }

    #[test]
    fn tumble_group_by() {
        let plan = parse("SELECT event_time AS w, k, SUM(v) AS total FROM t GROUP BY TUMBLE(event_time, INTERVAL '1' HOUR), k")
            .unwrap();
        let LogicalPlan::Project { input, .. } = plan else { panic!() };
        let LogicalPlan::TumbleAggregate { window, group_by, .. } = *input else { panic!() };
        assert_eq!(window.millis(), Some(3_600_000));
        assert_eq!(group_by, vec![Expr::col(None, "k")]);
    }

    #[test]
    fn join_without_bound_rejected() {
        assert!(parse("SELECT a.x FROM a JOIN b ON a.k = b.k").is_err());
    }

    #[test]
    fn precedence() {
        let plan = parse("SELECT x FROM a WHERE NOT a = 1 OR b > 2 AND c IS NOT NULL").unwrap();
        let LogicalPlan::Project { input, .. } = plan else { panic!() };
        let LogicalPlan::Filter { predicate, .. } = *input else { panic!() };
        assert_eq!(
            predicate.to_string(),
            "((NOT (a = 1)) OR ((b > 2) AND (c IS NOT NULL)))"
        );
    }

    #[test]
    fn pretty_print_reparses() {
        for q in [
            LATE_SHIPMENTS,
            "SELECT x FROM a",
            "SELECT -x * 2 + 1.5 AS y, 'it''s' AS s FROM a AS b WHERE TIMESTAMP '2020-01-01T00:00:00Z' < event_time",
            "SELECT event_time AS w, COUNT(*) AS n, AVG(v) AS m FROM t WHERE v BETWEEN 1 AND 10 GROUP BY TUMBLE(event_time, INTERVAL '10' SECOND), k",
            "SELECT a.x, b.y FROM a JOIN b ON a.k = b.k AND a.j = b.j AND b.t BETWEEN a.t AND a.t + INTERVAL '3' DAY",
        ] {
            let plan = parse(q).unwrap();
            let printed = plan.to_string();
            assert_eq!(parse(&printed).unwrap(), plan, "{printed}");
        }
    }
}
