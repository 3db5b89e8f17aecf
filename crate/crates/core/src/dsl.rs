//! The update-rule language.
//!
//! A program is a sequence of one to four groups. Each group picks two
//! operands, applies a unary function to each, and combines the results with
//! a binary function:
//!
//! ```text
//! op1 op2 u1 u2 b   ==>   b(u1(op1), u2(op2))
//! ```
//!
//! The output of group `k` is appended to the operand bank and can be picked
//! by later groups as `out<k>`. The output of the last group is the update
//! `u`, applied as `w <- w - lr * u`.
//!
//! Text form: whitespace-separated tokens, groups separated by `;`.
//!
//! ```
//! use optsearch::dsl::UpdateRuleProgram;
//!
//! let power_sign: UpdateRuleProgram = "sign_g sign_m id id mul ; out1 g exp id mul".parse().unwrap();
//! assert_eq!(power_sign.len(), 2);
//! assert_eq!(power_sign.to_string(), "sign_g sign_m id id mul ; out1 g exp id mul");
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Longest program accepted (binary trees of depth 1 to 4).
pub const MAX_GROUPS: usize = 4;

/// Tokens per group.
pub const GROUP_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DslError {
    #[error("empty program")]
    Empty,
    #[error("unknown token `{token}` in group {group} at position {position}")]
    UnknownToken {
        group: usize,
        position: usize,
        token: String,
    },
    #[error("token `{token}` in group {group} at position {position} is a {found}, expected a {expected}")]
    MisplacedToken {
        group: usize,
        position: usize,
        token: String,
        expected: TokenKind,
        found: TokenKind,
    },
    #[error("group {group} has {count} tokens, expected 5")]
    WrongArity { group: usize, count: usize },
    #[error("group {group} references out{index}, which is not computed before it")]
    ForwardBankReference { group: usize, index: usize },
    #[error("program has {count} groups, at most 4 are allowed")]
    TooManyGroups { count: usize },
    #[error("allow-list for {0} tokens is empty")]
    EmptyAllowList(TokenKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Operand,
    Unary,
    Binary,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenKind::Operand => "operand",
            TokenKind::Unary => "unary function",
            TokenKind::Binary => "binary function",
        })
    }
}

/// Selectable inputs of a group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Operand {
    /// `g`
    Grad,
    /// `g2`
    GradSquared,
    /// `g3`
    GradCubed,
    /// `m`: bias-corrected EMA of g.
    FirstMoment,
    /// `v`: bias-corrected EMA of g².
    SecondMoment,
    /// `gamma`: bias-corrected EMA of g³.
    ThirdMoment,
    /// `sign_g`
    SignGrad,
    /// `sign_m`
    SignMoment,
    /// `c1`
    One,
    /// `c2`
    Two,
    /// `eps`: fresh Gaussian noise with variance 0.01.
    Noise,
    /// `wd<k>`: `10^-k * w` for k in 1..=4.
    ScaledWeight(u8),
    /// `adam`: m̂ / (√v̂ + δ).
    Adam,
    /// `rmsprop`: g / (√v̂ + δ).
    RmsProp,
    /// `ld`
    LinearDecay,
    /// `cd<n>`; bare `cd` is n = 1/2.
    CyclicalDecay(f64),
    /// `rd<n>`
    RestartDecay(u32),
    /// `eps_t`: Gaussian noise with variance 1/(1+t)^0.55.
    AnnealedNoise,
    /// `out<k>`: output of group k (1-based).
    Output(usize),
}

impl Operand {
    /// Every non-parametric operand plus the parametric ones at the values used
    /// by the default search space. Bank references are not included.
    pub const BASE: [Operand; 17] = [
        Operand::Grad,
        Operand::GradSquared,
        Operand::GradCubed,
        Operand::FirstMoment,
        Operand::SecondMoment,
        Operand::ThirdMoment,
        Operand::SignGrad,
        Operand::SignMoment,
        Operand::One,
        Operand::Two,
        Operand::Noise,
        Operand::ScaledWeight(4),
        Operand::ScaledWeight(3),
        Operand::ScaledWeight(2),
        Operand::ScaledWeight(1),
        Operand::Adam,
        Operand::RmsProp,
    ];

    pub const DECAYS: [Operand; 5] = [
        Operand::LinearDecay,
        Operand::CyclicalDecay(0.5),
        Operand::RestartDecay(10),
        Operand::RestartDecay(20),
        Operand::AnnealedNoise,
    ];

    pub fn is_output(&self) -> bool {
        matches!(self, Operand::Output(_))
    }

    fn parse(s: &str) -> Option<Operand> {
        let op = match s {
            "g" => Operand::Grad,
            "g2" => Operand::GradSquared,
            "g3" => Operand::GradCubed,
            "m" => Operand::FirstMoment,
            "v" => Operand::SecondMoment,
            "gamma" => Operand::ThirdMoment,
            "sign_g" => Operand::SignGrad,
            "sign_m" => Operand::SignMoment,
            "c1" => Operand::One,
            "c2" => Operand::Two,
            "eps" => Operand::Noise,
            "wd4" => Operand::ScaledWeight(4),
            "wd3" => Operand::ScaledWeight(3),
            "wd2" => Operand::ScaledWeight(2),
            "wd1" => Operand::ScaledWeight(1),
            "adam" => Operand::Adam,
            "rmsprop" => Operand::RmsProp,
            "ld" => Operand::LinearDecay,
            "cd" => Operand::CyclicalDecay(0.5),
            "eps_t" => Operand::AnnealedNoise,
            _ => {
                if let Some(rest) = s.strip_prefix("out") {
                    let k = parse_index(rest)?;
                    return (k >= 1).then_some(Operand::Output(k));
                }
                if let Some(rest) = s.strip_prefix("rd") {
                    let n = u32::try_from(parse_index(rest)?).ok()?;
                    return (n >= 1).then_some(Operand::RestartDecay(n));
                }
                if let Some(rest) = s.strip_prefix("cd") {
                    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit() || b == b'.') {
                        return None;
                    }
                    let n: f64 = rest.parse().ok()?;
                    return (n.is_finite() && n > 0.0).then_some(Operand::CyclicalDecay(n));
                }
                return None;
            }
        };
        Some(op)
    }
}

/// Canonical unsigned decimal: no sign, no leading zeros.
fn parse_index(s: &str) -> Option<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
        return None;
    }
    s.parse().ok()
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Grad => f.write_str("g"),
            Operand::GradSquared => f.write_str("g2"),
            Operand::GradCubed => f.write_str("g3"),
            Operand::FirstMoment => f.write_str("m"),
            Operand::SecondMoment => f.write_str("v"),
            Operand::ThirdMoment => f.write_str("gamma"),
            Operand::SignGrad => f.write_str("sign_g"),
            Operand::SignMoment => f.write_str("sign_m"),
            Operand::One => f.write_str("c1"),
            Operand::Two => f.write_str("c2"),
            Operand::Noise => f.write_str("eps"),
            Operand::ScaledWeight(k) => write!(f, "wd{k}"),
            Operand::Adam => f.write_str("adam"),
            Operand::RmsProp => f.write_str("rmsprop"),
            Operand::LinearDecay => f.write_str("ld"),
            Operand::CyclicalDecay(n) if *n == 0.5 => f.write_str("cd"),
            Operand::CyclicalDecay(n) => write!(f, "cd{n}"),
            Operand::RestartDecay(n) => write!(f, "rd{n}"),
            Operand::AnnealedNoise => f.write_str("eps_t"),
            Operand::Output(k) => write!(f, "out{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Unary {
    Identity,
    Neg,
    Exp,
    /// log(|x| + guard)
    Log,
    /// √|x|
    Sqrt,
    Clip5,
    Clip4,
    Clip3,
    Drop1,
    Drop3,
    Drop5,
    Sign,
    /// Extension, not part of the default search space.
    Sigmoid,
}

impl Unary {
    pub const ALL: [Unary; 13] = [
        Unary::Identity,
        Unary::Neg,
        Unary::Exp,
        Unary::Log,
        Unary::Sqrt,
        Unary::Clip5,
        Unary::Clip4,
        Unary::Clip3,
        Unary::Drop1,
        Unary::Drop3,
        Unary::Drop5,
        Unary::Sign,
        Unary::Sigmoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Unary::Identity => "id",
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sqrt => "sqrt",
            Unary::Clip5 => "clip5",
            Unary::Clip4 => "clip4",
            Unary::Clip3 => "clip3",
            Unary::Drop1 => "drop1",
            Unary::Drop3 => "drop3",
            Unary::Drop5 => "drop5",
            Unary::Sign => "sign",
            Unary::Sigmoid => "sigmoid",
        }
    }

    fn parse(s: &str) -> Option<Unary> {
        Unary::ALL.into_iter().find(|u| u.name() == s)
    }
}

impl fmt::Display for Unary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    /// x / (y + δ)
    Div,
    /// sign(x)·|x|^y
    Pow,
    /// keep left
    Left,
}

impl Binary {
    pub const ALL: [Binary; 6] = [
        Binary::Add,
        Binary::Sub,
        Binary::Mul,
        Binary::Div,
        Binary::Pow,
        Binary::Left,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Pow => "pow",
            Binary::Left => "left",
        }
    }

    fn parse(s: &str) -> Option<Binary> {
        Binary::ALL.into_iter().find(|b| b.name() == s)
    }
}

impl fmt::Display for Binary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One symbol of the language.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Token {
    Operand(Operand),
    Unary(Unary),
    Binary(Binary),
}

impl Token {
    pub fn kind(&self) -> TokenKind {
        match self {
            Token::Operand(_) => TokenKind::Operand,
            Token::Unary(_) => TokenKind::Unary,
            Token::Binary(_) => TokenKind::Binary,
        }
    }

    pub fn parse(s: &str) -> Option<Token> {
        Operand::parse(s)
            .map(Token::Operand)
            .or_else(|| Unary::parse(s).map(Token::Unary))
            .or_else(|| Binary::parse(s).map(Token::Binary))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Operand(o) => o.fmt(f),
            Token::Unary(u) => u.fmt(f),
            Token::Binary(b) => b.fmt(f),
        }
    }
}

/// `b(u1(op1), u2(op2))`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Group {
    pub op1: Operand,
    pub op2: Operand,
    pub u1: Unary,
    pub u2: Unary,
    pub binary: Binary,
}

impl Group {
    pub fn new(op1: Operand, op2: Operand, u1: Unary, u2: Unary, binary: Binary) -> Self {
        Self {
            op1,
            op2,
            u1,
            u2,
            binary,
        }
    }

    pub fn tokens(&self) -> [Token; GROUP_LEN] {
        [
            Token::Operand(self.op1),
            Token::Operand(self.op2),
            Token::Unary(self.u1),
            Token::Unary(self.u2),
            Token::Binary(self.binary),
        ]
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {}", self.op1, self.op2, self.u1, self.u2, self.binary)
    }
}

/// A structurally valid program: 1 to 4 groups, bank references only point
/// backwards.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRuleProgram {
    groups: Vec<Group>,
}

impl UpdateRuleProgram {
    pub fn new(groups: Vec<Group>) -> Result<Self, DslError> {
        if groups.is_empty() {
            return Err(DslError::Empty);
        }
        if groups.len() > MAX_GROUPS {
            return Err(DslError::TooManyGroups { count: groups.len() });
        }
        for (i, group) in groups.iter().enumerate() {
            for op in [group.op1, group.op2] {
                if let Operand::Output(k) = op {
                    if k == 0 || k > i {
                        return Err(DslError::ForwardBankReference { group: i + 1, index: k });
                    }
                }
            }
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn final_group(&self) -> &Group {
        self.groups.last().expect("programs have at least one group")
    }

    /// Every operand referenced anywhere in the program.
    pub fn operands(&self) -> impl Iterator<Item = Operand> + '_ {
        self.groups.iter().flat_map(|g| [g.op1, g.op2])
    }

    /// Vector slots and counters the program needs from optimizer state.
    pub fn required_state(&self) -> StateRequirements {
        let mut req = StateRequirements::default();
        for op in self.operands() {
            req.add_operand(op);
        }
        req
    }

    pub fn validate(&self, constraints: &ConstraintSet) -> ValidationReport {
        constraints.check(self)
    }
}

impl FromStr for UpdateRuleProgram {
    type Err = DslError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_program(s)
    }
}

impl fmt::Display for UpdateRuleProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, group) in self.groups.iter().enumerate() {
            if i > 0 {
                f.write_str(" ; ")?;
            }
            group.fmt(f)?;
        }
        Ok(())
    }
}

pub fn parse_program(text: &str) -> Result<UpdateRuleProgram, DslError> {
    if text.trim().is_empty() {
        return Err(DslError::Empty);
    }
    let chunks: Vec<&str> = text.split(';').collect();
    if chunks.len() > MAX_GROUPS {
        return Err(DslError::TooManyGroups { count: chunks.len() });
    }

    let mut groups = Vec::with_capacity(chunks.len());
    for (gi, chunk) in chunks.iter().enumerate() {
        let group = gi + 1;
        let words: Vec<&str> = chunk.split_whitespace().collect();
        if words.len() != GROUP_LEN {
            return Err(DslError::WrongArity {
                group,
                count: words.len(),
            });
        }
        let expected = [
            TokenKind::Operand,
            TokenKind::Operand,
            TokenKind::Unary,
            TokenKind::Unary,
            TokenKind::Binary,
        ];
        let mut tokens = [Token::Binary(Binary::Left); GROUP_LEN];
        for (pi, word) in words.iter().enumerate() {
            let token = Token::parse(word).ok_or_else(|| DslError::UnknownToken {
                group,
                position: pi + 1,
                token: (*word).to_string(),
            })?;
            if token.kind() != expected[pi] {
                return Err(DslError::MisplacedToken {
                    group,
                    position: pi + 1,
                    token: (*word).to_string(),
                    expected: expected[pi],
                    found: token.kind(),
                });
            }
            if let Token::Operand(Operand::Output(k)) = token {
                if k >= group {
                    return Err(DslError::ForwardBankReference { group, index: k });
                }
            }
            tokens[pi] = token;
        }
        let [Token::Operand(op1), Token::Operand(op2), Token::Unary(u1), Token::Unary(u2), Token::Binary(binary)] =
            tokens
        else {
            unreachable!("token kinds checked above");
        };
        groups.push(Group::new(op1, op2, u1, u2, binary));
    }
    UpdateRuleProgram::new(groups)
}

pub fn format_program(program: &UpdateRuleProgram) -> String {
    program.to_string()
}

/// Optimizer-state slots a program can depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StateSlot {
    FirstMoment,
    SecondMoment,
    ThirdMoment,
    InnerAdam,
    InnerRmsProp,
    /// Classical momentum accumulator; only the native momentum optimizer uses it.
    Momentum,
    Step,
}

impl StateSlot {
    pub fn name(self) -> &'static str {
        match self {
            StateSlot::FirstMoment => "m",
            StateSlot::SecondMoment => "v",
            StateSlot::ThirdMoment => "gamma",
            StateSlot::InnerAdam => "adam",
            StateSlot::InnerRmsProp => "rmsprop",
            StateSlot::Momentum => "momentum",
            StateSlot::Step => "step",
        }
    }

    /// Whether the slot owns a parameter-sized vector.
    pub fn is_vector(self) -> bool {
        matches!(
            self,
            StateSlot::FirstMoment | StateSlot::SecondMoment | StateSlot::ThirdMoment | StateSlot::Momentum
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StateRequirements {
    slots: BTreeSet<StateSlot>,
}

impl StateRequirements {
    pub fn from_slots(slots: impl IntoIterator<Item = StateSlot>) -> Self {
        Self {
            slots: slots.into_iter().collect(),
        }
    }

    pub fn contains(&self, slot: StateSlot) -> bool {
        self.slots.contains(&slot)
    }

    pub fn insert(&mut self, slot: StateSlot) {
        self.slots.insert(slot);
    }

    pub fn iter(&self) -> impl Iterator<Item = StateSlot> + '_ {
        self.slots.iter().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Number of parameter-sized running averages (m, v, gamma).
    pub fn ema_slots(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.is_vector() && **s != StateSlot::Momentum)
            .count()
    }

    /// Number of parameter-sized vectors the state allocates.
    pub fn vector_slots(&self) -> usize {
        self.slots.iter().filter(|s| s.is_vector()).count()
    }

    fn add_operand(&mut self, op: Operand) {
        use StateSlot::*;
        let needed: &[StateSlot] = match op {
            Operand::FirstMoment | Operand::SignMoment => &[FirstMoment, Step],
            Operand::SecondMoment => &[SecondMoment, Step],
            Operand::ThirdMoment => &[ThirdMoment, Step],
            // inner optimizers read the rule's own moments
            Operand::Adam => &[InnerAdam, FirstMoment, SecondMoment, Step],
            Operand::RmsProp => &[InnerRmsProp, SecondMoment, Step],
            Operand::LinearDecay | Operand::CyclicalDecay(_) | Operand::RestartDecay(_) | Operand::AnnealedNoise => {
                &[Step]
            }
            Operand::Grad
            | Operand::GradSquared
            | Operand::GradCubed
            | Operand::SignGrad
            | Operand::One
            | Operand::Two
            | Operand::Noise
            | Operand::ScaledWeight(_)
            | Operand::Output(_) => &[],
        };
        self.slots.extend(needed.iter().copied());
    }
}

impl fmt::Display for StateRequirements {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.slots.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<_> = self.slots.iter().map(|s| s.name()).collect();
        f.write_str(&names.join(", "))
    }
}

/// A token allow-list. `All` admits the whole vocabulary of that kind.
#[derive(Debug, Clone, PartialEq)]
pub enum AllowList<T> {
    All,
    Only(Vec<T>),
}

impl<T: PartialEq> AllowList<T> {
    pub fn allows(&self, item: &T) -> bool {
        match self {
            AllowList::All => true,
            AllowList::Only(items) => items.contains(item),
        }
    }

    fn is_empty(&self) -> bool {
        matches!(self, AllowList::Only(items) if items.is_empty())
    }
}

/// Sampling constraints. Bank references (`out<k>`) are never subject to the
/// operand allow-list.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub distinct_operands: bool,
    pub no_final_add: bool,
    pub must_reuse_output: bool,
    operands: AllowList<Operand>,
    unaries: AllowList<Unary>,
    binaries: AllowList<Binary>,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        Self::permissive()
    }
}

impl ConstraintSet {
    pub fn new(
        operands: AllowList<Operand>,
        unaries: AllowList<Unary>,
        binaries: AllowList<Binary>,
    ) -> Result<Self, DslError> {
        if operands.is_empty() {
            return Err(DslError::EmptyAllowList(TokenKind::Operand));
        }
        if unaries.is_empty() {
            return Err(DslError::EmptyAllowList(TokenKind::Unary));
        }
        if binaries.is_empty() {
            return Err(DslError::EmptyAllowList(TokenKind::Binary));
        }
        Ok(Self {
            distinct_operands: false,
            no_final_add: false,
            must_reuse_output: false,
            operands,
            unaries,
            binaries,
        })
    }

    /// Whole vocabulary, `sigmoid` included, no structural flags.
    pub fn permissive() -> Self {
        Self {
            distinct_operands: false,
            no_final_add: false,
            must_reuse_output: false,
            operands: AllowList::All,
            unaries: AllowList::All,
            binaries: AllowList::All,
        }
    }

    /// The default search space: base and decay operands, every unary except
    /// `sigmoid`, every binary.
    pub fn search_space() -> Self {
        let operands = Operand::BASE.into_iter().chain(Operand::DECAYS).collect();
        let unaries = Unary::ALL.into_iter().filter(|u| *u != Unary::Sigmoid).collect();
        Self {
            operands: AllowList::Only(operands),
            unaries: AllowList::Only(unaries),
            binaries: AllowList::Only(Binary::ALL.to_vec()),
            ..Self::permissive()
        }
    }

    pub fn with_distinct_operands(mut self, on: bool) -> Self {
        self.distinct_operands = on;
        self
    }

    pub fn with_no_final_add(mut self, on: bool) -> Self {
        self.no_final_add = on;
        self
    }

    pub fn with_must_reuse_output(mut self, on: bool) -> Self {
        self.must_reuse_output = on;
        self
    }

    /// Adds `sigmoid` to a restricted unary allow-list.
    pub fn with_sigmoid(mut self) -> Self {
        if let AllowList::Only(items) = &mut self.unaries {
            if !items.contains(&Unary::Sigmoid) {
                items.push(Unary::Sigmoid);
            }
        }
        self
    }

    pub fn operands(&self) -> &AllowList<Operand> {
        &self.operands
    }

    pub fn unaries(&self) -> &AllowList<Unary> {
        &self.unaries
    }

    pub fn binaries(&self) -> &AllowList<Binary> {
        &self.binaries
    }

    pub fn allows_operand(&self, op: &Operand) -> bool {
        op.is_output() || self.operands.allows(op)
    }

    pub fn allows_unary(&self, u: &Unary) -> bool {
        self.unaries.allows(u)
    }

    pub fn allows_binary(&self, b: &Binary) -> bool {
        self.binaries.allows(b)
    }

    pub fn check(&self, program: &UpdateRuleProgram) -> ValidationReport {
        let mut violations = Vec::new();
        let n = program.len();
        for (gi, g) in program.groups().iter().enumerate() {
            let group = gi + 1;
            for (position, op) in [(1, g.op1), (2, g.op2)] {
                if !self.allows_operand(&op) {
                    violations.push(Violation::TokenNotAllowed {
                        group,
                        position,
                        token: op.to_string(),
                    });
                }
            }
            for (position, u) in [(3, g.u1), (4, g.u2)] {
                if !self.allows_unary(&u) {
                    violations.push(Violation::TokenNotAllowed {
                        group,
                        position,
                        token: u.to_string(),
                    });
                }
            }
            if !self.allows_binary(&g.binary) {
                violations.push(Violation::TokenNotAllowed {
                    group,
                    position: 5,
                    token: g.binary.to_string(),
                });
            }
            if self.distinct_operands && g.op1 == g.op2 {
                violations.push(Violation::DuplicateOperands { group });
            }
            if self.must_reuse_output && group > 1 && !g.op1.is_output() && !g.op2.is_output() {
                violations.push(Violation::MissingReuse { group });
            }
            if self.no_final_add && group == n && g.binary == Binary::Add {
                violations.push(Violation::FinalAdd);
            }
        }
        ValidationReport { violations }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateOperands {
        group: usize,
    },
    FinalAdd,
    MissingReuse {
        group: usize,
    },
    TokenNotAllowed {
        group: usize,
        position: usize,
        token: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateOperands { group } => {
                write!(f, "group {group}: op1 == op2")
            }
            Violation::FinalAdd => f.write_str("final binary is add"),
            Violation::MissingReuse { group } => {
                write!(f, "group {group}: no previous output reused")
            }
            Violation::TokenNotAllowed { group, position, token } => {
                write!(f, "group {group}, position {position}: `{token}` not allowed")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            v.fmt(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> UpdateRuleProgram {
        s.parse().unwrap()
    }

    #[test]
    fn parses_sgd_adam_and_power_sign() {
        let sgd = p("g g id id left");
        assert_eq!(
            sgd.groups(),
            &[Group::new(
                Operand::Grad,
                Operand::Grad,
                Unary::Identity,
                Unary::Identity,
                Binary::Left
            )]
        );

        let adam = p("m v id sqrt div");
        assert_eq!(adam.final_group().op2, Operand::SecondMoment);
        assert_eq!(adam.final_group().u2, Unary::Sqrt);

        let ps = p("sign_g sign_m id id mul ; out1 g exp id mul");
        assert_eq!(ps.len(), 2);
        assert_eq!(ps.groups()[1].op1, Operand::Output(1));
        assert_eq!(ps.to_string(), "sign_g sign_m id id mul ; out1 g exp id mul");
    }

    #[test]
    fn format_is_canonical() {
        let messy = p("  sign_g\tsign_m id id mul;out1   g exp id mul ");
        assert_eq!(format_program(&messy), "sign_g sign_m id id mul ; out1 g exp id mul");
        assert_eq!(p("g g id id left").to_string(), "g g id id left");
        assert_eq!(p("cd0.5 cd2.0 id id mul").to_string(), "cd cd2 id id mul");
    }

    #[test]
    fn parametric_operands() {
        let prog = p("cd3 rd10 id id mul ; cd0.25 out1 id id mul");
        assert_eq!(prog.groups()[0].op1, Operand::CyclicalDecay(3.0));
        assert_eq!(prog.groups()[0].op2, Operand::RestartDecay(10));
        assert_eq!(prog.groups()[1].op1, Operand::CyclicalDecay(0.25));
        for bad in [
            "rd0", "rd", "rd01", "out0", "out01", "cd-1", "cd0", "cdinf", "cdNaN", "cd1e3",
        ] {
            let text = format!("{bad} g id id mul");
            assert!(
                matches!(parse_program(&text), Err(DslError::UnknownToken { .. })),
                "{bad} should be rejected"
            );
        }
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_program(""), Err(DslError::Empty));
        assert_eq!(parse_program("  \n"), Err(DslError::Empty));
        assert_eq!(
            parse_program("g g id id"),
            Err(DslError::WrongArity { group: 1, count: 4 })
        );
        assert_eq!(
            parse_program("g g id id left ;"),
            Err(DslError::WrongArity { group: 2, count: 0 })
        );
        assert_eq!(
            parse_program("g h id id left"),
            Err(DslError::UnknownToken {
                group: 1,
                position: 2,
                token: "h".into()
            })
        );
        assert!(matches!(
            parse_program("g g id left id"),
            Err(DslError::MisplacedToken {
                position: 4,
                expected: TokenKind::Unary,
                found: TokenKind::Binary,
                ..
            })
        ));
        assert_eq!(
            parse_program("out1 g id id left"),
            Err(DslError::ForwardBankReference { group: 1, index: 1 })
        );
        assert_eq!(
            parse_program("g g id id left ; out2 g id id add"),
            Err(DslError::ForwardBankReference { group: 2, index: 2 })
        );
        let five = ["g g id id left"; 5].join(" ; ");
        assert_eq!(parse_program(&five), Err(DslError::TooManyGroups { count: 5 }));
        let four = ["g g id id left"; 4].join(" ; ");
        assert!(parse_program(&four).is_ok());
    }

    #[test]
    fn constructor_enforces_structure() {
        let g = Group::new(
            Operand::Output(1),
            Operand::Grad,
            Unary::Identity,
            Unary::Identity,
            Binary::Mul,
        );
        assert!(UpdateRuleProgram::new(vec![g]).is_err());
        assert_eq!(UpdateRuleProgram::new(vec![]), Err(DslError::Empty));
    }

    #[test]
    fn validate_reports_each_violation() {
        let c = ConstraintSet::search_space().with_distinct_operands(true);
        let report = p("g g id id mul").validate(&c);
        assert_eq!(report.violations, vec![Violation::DuplicateOperands { group: 1 }]);

        let c = ConstraintSet::search_space().with_no_final_add(true);
        let report = p("g m id id add").validate(&c);
        assert_eq!(report.violations, vec![Violation::FinalAdd]);
        // add in a non-final group is fine
        assert!(p("g m id id add ; out1 g id id mul").validate(&c).is_valid());

        let c = ConstraintSet::search_space().with_must_reuse_output(true);
        assert!(p("sign_g sign_m id id mul ; out1 g exp id mul").validate(&c).is_valid());
        assert_eq!(
            p("g g id id left ; g m id id mul").validate(&c).violations,
            vec![Violation::MissingReuse { group: 2 }]
        );

        let report = p("m wd4 id sigmoid mul").validate(&ConstraintSet::search_space());
        assert_eq!(
            report.violations,
            vec![Violation::TokenNotAllowed {
                group: 1,
                position: 4,
                token: "sigmoid".into()
            }]
        );
        let ext = ConstraintSet::search_space().with_sigmoid();
        assert!(p("m wd4 id sigmoid mul").validate(&ext).is_valid());
    }

    #[test]
    fn empty_allow_list_rejected() {
        assert_eq!(
            ConstraintSet::new(AllowList::All, AllowList::Only(vec![]), AllowList::All),
            Err(DslError::EmptyAllowList(TokenKind::Unary))
        );
    }

    #[test]
    fn required_state_walks_operands() {
        use StateSlot::*;
        let ps = p("sign_g sign_m id id mul ; out1 g exp id mul").required_state();
        assert_eq!(ps, StateRequirements::from_slots([FirstMoment, Step]));
        assert_eq!(ps.ema_slots(), 1);
        assert_eq!(ps.to_string(), "m, step");

        assert!(p("g g id id left").required_state().is_empty());

        let adam = p("m v id sqrt div").required_state();
        assert_eq!(adam, StateRequirements::from_slots([FirstMoment, SecondMoment, Step]));
        assert_eq!(adam.ema_slots(), 2);

        let inner = p("adam g id id mul").required_state();
        assert!(inner.contains(InnerAdam));
        assert_eq!(inner.ema_slots(), 2);

        assert_eq!(
            p("ld g id id mul").required_state(),
            StateRequirements::from_slots([Step])
        );
    }
}
