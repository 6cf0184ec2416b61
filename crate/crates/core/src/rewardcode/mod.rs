//! A restricted arithmetic language for rewards written as code.
//!
//! ```text
//! expr    = compare ;
//! compare = sum { ("<" | "<=" | ">" | ">=" | "==") sum } ;
//! sum     = product { ("+" | "-") product } ;
//! product = unary { ("*" | "/") unary } ;
//! unary   = "-" unary | primary ;
//! primary = number | ident | call | "(" expr ")" ;
//! call    = ("min" | "max" | "abs" | "clip" | "if") "(" expr { "," expr } ")" ;
//! ```
//!
//! Identifiers must name a feature of the environment. Evaluation is total:
//! comparisons yield 1 or 0 and division by zero yields 0 with a flag.

mod generate;
mod parser;

use std::fmt;

use serde::Serialize;

use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::types::Observation;

pub use generate::{
    extract_candidates, generate_reward_code, CandidateOutcome, GenerationReport, RewardCodeRequest,
};
pub use parser::{parse_reward_expr, ParseError};

pub const MAX_DEPTH: usize = 32;
pub const MAX_NODES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
        }
    }

    pub const ALL: [BinOp; 9] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::Div,
        BinOp::Lt,
        BinOp::Le,
        BinOp::Gt,
        BinOp::Ge,
        BinOp::Eq,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Min,
    Max,
    Abs,
    Clip,
    If,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Min => "min",
            Func::Max => "max",
            Func::Abs => "abs",
            Func::Clip => "clip",
            Func::If => "if",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Abs => 1,
            Func::Min | Func::Max => 2,
            Func::Clip | Func::If => 3,
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "min" => Func::Min,
            "max" => Func::Max,
            "abs" => Func::Abs,
            "clip" => Func::Clip,
            "if" => Func::If,
            _ => return None,
        })
    }

    pub const ALL: [Func; 5] = [Func::Min, Func::Max, Func::Abs, Func::Clip, Func::If];
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var {
        name: String,
        index: usize,
    },
    Neg(Box<Expr>),
    Binary {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    Call {
        func: Func,
        args: Vec<Expr>,
    },
}

impl Expr {
    pub fn depth(&self) -> usize {
        1 + match self {
            Expr::Num(_) | Expr::Var { .. } => 0,
            Expr::Neg(e) => e.depth(),
            Expr::Binary { lhs, rhs, .. } => lhs.depth().max(rhs.depth()),
            Expr::Call { args, .. } => args.iter().map(Expr::depth).max().unwrap_or(0),
        }
    }

    pub fn node_count(&self) -> usize {
        1 + match self {
            Expr::Num(_) | Expr::Var { .. } => 0,
            Expr::Neg(e) => e.node_count(),
            Expr::Binary { lhs, rhs, .. } => lhs.node_count() + rhs.node_count(),
            Expr::Call { args, .. } => args.iter().map(Expr::node_count).sum(),
        }
    }

    fn eval_into(&self, features: &[f64], report: &mut EvalFlags) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var { index, .. } => features.get(*index).copied().unwrap_or(0.0),
            Expr::Neg(e) => -e.eval_into(features, report),
            Expr::Binary { op, lhs, rhs } => {
                let a = lhs.eval_into(features, report);
                let b = rhs.eval_into(features, report);
                let truth = |c: bool| if c { 1.0 } else { 0.0 };
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            report.div_by_zero = true;
                            0.0
                        } else {
                            a / b
                        }
                    }
                    BinOp::Lt => truth(a < b),
                    BinOp::Le => truth(a <= b),
                    BinOp::Gt => truth(a > b),
                    BinOp::Ge => truth(a >= b),
                    BinOp::Eq => truth(a == b),
                }
            }
            Expr::Call { func, args } => match func {
                Func::If => {
                    if args[0].eval_into(features, report) != 0.0 {
                        args[1].eval_into(features, report)
                    } else {
                        args[2].eval_into(features, report)
                    }
                }
                _ => {
                    let v: Vec<f64> = args.iter().map(|a| a.eval_into(features, report)).collect();
                    match func {
                        Func::Min => v[0].min(v[1]),
                        Func::Max => v[0].max(v[1]),
                        Func::Abs => v[0].abs(),
                        Func::Clip => v[0].max(v[1]).min(v[2]),
                        Func::If => unreachable!(),
                    }
                }
            },
        }
    }
}

/// Fully parenthesized rendering that reparses to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var { name, .. } => f.write_str(name),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Binary { op, lhs, rhs } => write!(f, "({lhs} {} {rhs})", op.symbol()),
            Expr::Call { func, args } => {
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

#[derive(Debug, Clone, PartialEq)]
pub struct RewardExpr {
    pub root: Expr,
}

impl RewardExpr {
    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }

    pub fn to_source(&self) -> String {
        self.root.to_string()
    }

    /// Evaluates against a raw feature vector. Never fails; a non-finite
    /// result is replaced by 0 and flagged.
    pub fn eval_features(&self, features: &[f64]) -> EvalReport {
        let mut flags = EvalFlags::default();
        let mut value = self.root.eval_into(features, &mut flags);
        let non_finite = !value.is_finite();
        if non_finite {
            value = 0.0;
        }
        EvalReport {
            value,
            div_by_zero: flags.div_by_zero,
            non_finite,
        }
    }
}

impl fmt::Display for RewardExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

#[derive(Default)]
struct EvalFlags {
    div_by_zero: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub value: f64,
    pub div_by_zero: bool,
    pub non_finite: bool,
}

pub fn eval_reward_expr(
    expr: &RewardExpr,
    obs: &Observation,
    map: &FeatureEnvMap,
) -> Result<EvalReport> {
    if obs.features.len() != map.len() {
        return Err(Error::DimensionMismatch {
            expected: map.len(),
            got: obs.features.len(),
        });
    }
    Ok(expr.eval_features(&obs.features))
}

/// Names for each feature index of an environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureEnvMap {
    names: Vec<String>,
}

impl FeatureEnvMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("feature map is empty"));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("duplicate feature name {n}")));
            }
            if Func::from_name(n).is_some() {
                return Err(Error::invalid(format!(
                    "feature name {n} shadows a builtin function"
                )));
            }
        }
        Ok(Self { names })
    }

    pub fn for_env<E: Environment>(env: &E) -> Result<Self> {
        let map = Self::new(env.feature_names())?;
        if map.len() != env.spec().feature_dim {
            return Err(Error::DimensionMismatch {
                expected: env.spec().feature_dim,
                got: map.len(),
            });
        }
        Ok(map)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doorkey_map() -> FeatureEnvMap {
        FeatureEnvMap::new(
            [
                "key_held",
                "door_open",
                "dist_key",
                "dist_door",
                "dist_goal",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        )
        .unwrap()
    }

    fn eval(src: &str, features: &[f64]) -> EvalReport {
        parse_reward_expr(src, &doorkey_map())
            .unwrap()
            .eval_features(features)
    }

    #[test]
    fn evaluator_examples() {
        assert_eq!(eval("1 + 2*3", &[0.0; 5]).value, 7.0);
        assert_eq!(
            eval("if(key_held, 0.5, 0.0)", &[1.0, 0.0, 0.0, 0.0, 0.0]).value,
            0.5
        );
        assert_eq!(
            eval("min(dist_goal, 5)/5", &[0.0, 0.0, 0.0, 0.0, 2.0]).value,
            0.4
        );
        let r = eval("1/0", &[0.0; 5]);
        assert_eq!(r.value, 0.0);
        assert!(r.div_by_zero);
        assert!(!eval("1/2", &[0.0; 5]).div_by_zero);
    }

    #[test]
    fn comparisons_and_functions() {
        let f = [1.0, 0.0, 3.0, 4.0, 2.0];
        assert_eq!(eval("dist_key < dist_door", &f).value, 1.0);
        assert_eq!(eval("dist_key >= dist_door", &f).value, 0.0);
        assert_eq!(eval("key_held == 1", &f).value, 1.0);
        assert_eq!(eval("clip(dist_door, 0, 2)", &f).value, 2.0);
        assert_eq!(eval("abs(-dist_goal)", &f).value, 2.0);
        assert_eq!(eval("max(dist_key, dist_door) - -1", &f).value, 5.0);
        assert_eq!(eval("1 + 1 < 3", &f).value, 1.0);
    }

    #[test]
    fn untaken_branch_does_not_flag() {
        let r = eval("if(1, 2, 1/0)", &[0.0; 5]);
        assert_eq!(r.value, 2.0);
        assert!(!r.div_by_zero);
    }

    #[test]
    fn overflow_is_contained() {
        let r = eval("1e308 * 10", &[0.0; 5]);
        assert_eq!(r.value, 0.0);
        assert!(r.non_finite);
    }

    #[test]
    fn feature_map_validation() {
        assert!(FeatureEnvMap::new(vec!["a".into(), "a".into()]).is_err());
        assert!(FeatureEnvMap::new(vec!["min".into()]).is_err());
        let env = crate::envs::doorkey::DoorKeyEnv::new();
        let map = FeatureEnvMap::for_env(&env).unwrap();
        assert_eq!(
            &map.names()[..5],
            &[
                "key_held",
                "door_open",
                "dist_key",
                "dist_door",
                "dist_goal"
            ]
        );
    }

    #[test]
    fn display_is_fully_parenthesized() {
        let e = parse_reward_expr("1 + 2*-dist_goal", &doorkey_map()).unwrap();
        assert_eq!(e.to_source(), "(1.0 + (2.0 * (-dist_goal)))");
    }
}
