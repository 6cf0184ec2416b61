use thiserror::Error;

use super::{BinOp, Expr, FeatureEnvMap, Func, RewardExpr, MAX_DEPTH, MAX_NODES};

/// Offsets count characters from the start of the source.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("empty expression")]
    Empty,
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier {name}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("unknown function {name}")]
    UnknownFunction { name: String, offset: usize },
    #[error("{name} takes {expected} arguments, got {got}")]
    Arity {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("expression depth {depth} exceeds the limit of {limit}")]
    TooDeep { depth: usize, limit: usize },
    #[error("expression has {nodes} nodes, above the limit of {limit}")]
    TooLarge { nodes: usize, limit: usize },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(BinOp),
    Minus,
    Plus,
    LParen,
    RParen,
    Comma,
}

struct Token {
    tok: Tok,
    offset: usize,
}

fn syntax(offset: usize, message: impl Into<String>) -> ParseError {
    ParseError::Syntax {
        offset,
        message: message.into(),
    }
}

fn lex(src: &[char]) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < src.len() {
        let c = src[i];
        let start = i;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && src.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            while i < src.len() && (src[i].is_ascii_digit() || src[i] == '.') {
                i += 1;
            }
            if i < src.len() && (src[i] == 'e' || src[i] == 'E') {
                let mut j = i + 1;
                if j < src.len() && (src[j] == '+' || src[j] == '-') {
                    j += 1;
                }
                if j < src.len() && src[j].is_ascii_digit() {
                    while j < src.len() && src[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text: String = src[start..i].iter().collect();
            let value: f64 = text
                .parse()
                .map_err(|_| syntax(start, format!("malformed number {text}")))?;
            out.push(Token {
                tok: Tok::Num(value),
                offset: start,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while i < src.len() && (src[i].is_ascii_alphanumeric() || src[i] == '_') {
                i += 1;
            }
            out.push(Token {
                tok: Tok::Ident(src[start..i].iter().collect()),
                offset: start,
            });
            continue;
        }
        let next = src.get(i + 1).copied();
        let (tok, width) = match (c, next) {
            ('<', Some('=')) => (Tok::Op(BinOp::Le), 2),
            ('>', Some('=')) => (Tok::Op(BinOp::Ge), 2),
            ('=', Some('=')) => (Tok::Op(BinOp::Eq), 2),
            ('<', _) => (Tok::Op(BinOp::Lt), 1),
            ('>', _) => (Tok::Op(BinOp::Gt), 1),
            ('≤', _) => (Tok::Op(BinOp::Le), 1),
            ('≥', _) => (Tok::Op(BinOp::Ge), 1),
            ('*', _) => (Tok::Op(BinOp::Mul), 1),
            ('/', _) => (Tok::Op(BinOp::Div), 1),
            ('+', _) => (Tok::Plus, 1),
            ('-', _) => (Tok::Minus, 1),
            ('(', _) => (Tok::LParen, 1),
            (')', _) => (Tok::RParen, 1),
            (',', _) => (Tok::Comma, 1),
            _ => return Err(syntax(start, format!("unexpected character '{c}'"))),
        };
        out.push(Token { tok, offset: start });
        i += width;
    }
    Ok(out)
}

const MAX_NESTING: usize = 4 * MAX_DEPTH;

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    end_offset: usize,
    map: &'a FeatureEnvMap,
    nesting: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|t| &t.tok)
    }

    fn offset(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map_or(self.end_offset, |t| t.offset)
    }

    fn unexpected(&self, wanted: &str) -> ParseError {
        match self.tokens.get(self.pos) {
            Some(t) => syntax(t.offset, format!("expected {wanted}, found {:?}", t.tok)),
            None => syntax(
                self.end_offset,
                format!("expected {wanted}, found end of input"),
            ),
        }
    }

    fn expect(&mut self, tok: Tok, wanted: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.unexpected(wanted))
        }
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.nesting += 1;
        if self.nesting > MAX_NESTING {
            return Err(ParseError::TooDeep {
                depth: self.nesting,
                limit: MAX_DEPTH,
            });
        }
        Ok(())
    }

    fn compare(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.sum()?;
        while let Some(Tok::Op(op @ (BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge | BinOp::Eq))) =
            self.peek()
        {
            let op = *op;
            self.pos += 1;
            let rhs = self.sum()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Plus) => BinOp::Add,
                Some(Tok::Minus) => BinOp::Sub,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.product()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(op @ (BinOp::Mul | BinOp::Div))) = self.peek() {
            let op = *op;
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(&Tok::Minus) {
            self.pos += 1;
            self.enter()?;
            let inner = self.unary()?;
            self.nesting -= 1;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                self.enter()?;
                let e = self.compare()?;
                self.nesting -= 1;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.peek() == Some(&Tok::LParen) {
                    let func =
                        Func::from_name(&name).ok_or_else(|| ParseError::UnknownFunction {
                            name: name.clone(),
                            offset,
                        })?;
                    self.pos += 1;
                    self.enter()?;
                    let mut args = vec![self.compare()?];
                    while self.peek() == Some(&Tok::Comma) {
                        self.pos += 1;
                        args.push(self.compare()?);
                    }
                    self.nesting -= 1;
                    self.expect(Tok::RParen, "',' or ')'")?;
                    if args.len() != func.arity() {
                        return Err(ParseError::Arity {
                            name,
                            expected: func.arity(),
                            got: args.len(),
                        });
                    }
                    Ok(Expr::Call { func, args })
                } else {
                    match self.map.index_of(&name) {
                        Some(index) => Ok(Expr::Var { name, index }),
                        None => Err(ParseError::UnknownIdentifier { name, offset }),
                    }
                }
            }
            _ => Err(self.unexpected("a number, identifier, or '('")),
        }
    }
}

pub fn parse_reward_expr(source: &str, features: &FeatureEnvMap) -> Result<RewardExpr, ParseError> {
    let chars: Vec<char> = source.chars().collect();
    let tokens = lex(&chars)?;
    if tokens.is_empty() {
        return Err(ParseError::Empty);
    }
    // Errors at end of input point at the last character.
    let end_offset = chars.len().saturating_sub(1);
    let mut p = Parser {
        tokens,
        pos: 0,
        end_offset,
        map: features,
        nesting: 0,
    };
    let root = p.compare()?;
    if p.pos < p.tokens.len() {
        return Err(p.unexpected("end of input"));
    }
    let depth = root.depth();
    if depth > MAX_DEPTH {
        return Err(ParseError::TooDeep {
            depth,
            limit: MAX_DEPTH,
        });
    }
    let nodes = root.node_count();
    if nodes > MAX_NODES {
        return Err(ParseError::TooLarge {
            nodes,
            limit: MAX_NODES,
        });
    }
    Ok(RewardExpr { root })
}
