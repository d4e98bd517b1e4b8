//! Integer expressions and comparison predicates over record columns.

use serde::{Deserialize, Serialize};

use super::common::ClassCounts;
use crate::machine::InstrClass::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Lt,
    Le,
    Eq,
    Ne,
    Ge,
    Gt,
}

impl CmpOp {
    pub fn holds(self, a: i64, b: i64) -> bool {
        match self {
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Ge => a >= b,
            CmpOp::Gt => a > b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    Const(i64),
    Col(usize),
}

/// One conjunct of a selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pred {
    Cmp { col: usize, op: CmpOp, rhs: Operand },
    /// `lo <= col <= hi`.
    Between { col: usize, lo: i64, hi: i64 },
}

impl Pred {
    pub fn cmp(col: usize, op: CmpOp, v: i64) -> Self {
        Pred::Cmp { col, op, rhs: Operand::Const(v) }
    }

    pub fn cols(col: usize, op: CmpOp, other: usize) -> Self {
        Pred::Cmp { col, op, rhs: Operand::Col(other) }
    }

    pub fn between(col: usize, lo: i64, hi: i64) -> Self {
        Pred::Between { col, lo, hi }
    }

    pub fn eval(&self, rec: &[u64]) -> bool {
        match *self {
            Pred::Cmp { col, op, rhs } => {
                let b = match rhs {
                    Operand::Const(v) => v,
                    Operand::Col(c) => rec[c] as i64,
                };
                op.holds(rec[col] as i64, b)
            }
            Pred::Between { col, lo, hi } => {
                let v = rec[col] as i64;
                lo <= v && v <= hi
            }
        }
    }

    /// Columns the predicate reads.
    pub fn max_col(&self) -> usize {
        match *self {
            Pred::Cmp { col, rhs: Operand::Col(c), .. } => col.max(c),
            Pred::Cmp { col, .. } | Pred::Between { col, .. } => col,
        }
    }

    pub(crate) fn mix(&self, acc: &mut ClassCounts) {
        match self {
            Pred::Cmp { rhs, .. } => {
                acc.add(WramLoad8, if matches!(rhs, Operand::Col(_)) { 2 } else { 1 });
                acc.add(Cmp, 2);
                acc.add(Branch, 1);
            }
            Pred::Between { .. } => {
                acc.add(WramLoad8, 1);
                acc.add(Cmp, 4);
                acc.add(Branch, 2);
            }
        }
    }
}

/// Wrapping 64-bit integer expression over the columns of one record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Col(usize),
    Const(i64),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Shl(Box<Expr>, u32),
    Shr(Box<Expr>, u32),
    And(Box<Expr>, i64),
    Or(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn col(c: usize) -> Self {
        Expr::Col(c)
    }

    pub fn add(a: Expr, b: Expr) -> Self {
        Expr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Self {
        Expr::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Self {
        Expr::Mul(Box::new(a), Box::new(b))
    }

    pub fn shl(a: Expr, s: u32) -> Self {
        Expr::Shl(Box::new(a), s)
    }

    pub fn shr(a: Expr, s: u32) -> Self {
        Expr::Shr(Box::new(a), s)
    }

    pub fn and(a: Expr, mask: i64) -> Self {
        Expr::And(Box::new(a), mask)
    }

    pub fn or(a: Expr, b: Expr) -> Self {
        Expr::Or(Box::new(a), Box::new(b))
    }

    pub fn eval(&self, rec: &[u64]) -> i64 {
        match self {
            Expr::Col(c) => rec[*c] as i64,
            Expr::Const(v) => *v,
            Expr::Add(a, b) => a.eval(rec).wrapping_add(b.eval(rec)),
            Expr::Sub(a, b) => a.eval(rec).wrapping_sub(b.eval(rec)),
            Expr::Mul(a, b) => a.eval(rec).wrapping_mul(b.eval(rec)),
            Expr::Shl(a, s) => a.eval(rec).wrapping_shl(*s),
            Expr::Shr(a, s) => a.eval(rec).wrapping_shr(*s),
            Expr::And(a, m) => a.eval(rec) & m,
            Expr::Or(a, b) => a.eval(rec) | b.eval(rec),
        }
    }

    pub fn max_col(&self) -> Option<usize> {
        match self {
            Expr::Col(c) => Some(*c),
            Expr::Const(_) => None,
            Expr::Shl(a, _) | Expr::Shr(a, _) | Expr::And(a, _) => a.max_col(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Or(a, b) => a.max_col().max(b.max_col()),
        }
    }

    /// Instructions to evaluate the expression into a register.
    pub(crate) fn mix(&self, acc: &mut ClassCounts) {
        match self {
            Expr::Col(_) => acc.add(WramLoad8, 1),
            Expr::Const(_) => acc.add(Add32, 2),
            Expr::Add(a, b) | Expr::Sub(a, b) => {
                a.mix(acc);
                b.mix(acc);
                acc.add(Add64, 1);
            }
            Expr::Mul(a, b) => {
                a.mix(acc);
                b.mix(acc);
                acc.add(Mul64, 1);
            }
            Expr::Shl(a, _) | Expr::Shr(a, _) => {
                a.mix(acc);
                acc.add(Logic32, 3);
            }
            Expr::And(a, _) => {
                a.mix(acc);
                acc.add(Logic32, 2);
            }
            Expr::Or(a, b) => {
                a.mix(acc);
                b.mix(acc);
                acc.add(Logic32, 2);
            }
        }
    }
}
