//! Keyword-triggered numeric execution for the final sub-question.
//!
//! The final sub-question (after reference substitution) is mapped to one of
//! seven operators by keyword, its decimal literals become operands, and the
//! program is evaluated with exact rational arithmetic. Failures are values:
//! the caller leaves answer decoding untouched when the pipeline does not
//! succeed.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// Fraction digits kept when a quotient has no finite decimal expansion.
pub const MAX_FRACTION_DIGITS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NumericOp {
    Max,
    Min,
    Sum,
    Diff,
    Mul,
    Div,
    Or,
}

impl NumericOp {
    pub const ALL: [NumericOp; 7] = [
        NumericOp::Max,
        NumericOp::Min,
        NumericOp::Sum,
        NumericOp::Diff,
        NumericOp::Mul,
        NumericOp::Div,
        NumericOp::Or,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NumericOp::Max => "max",
            NumericOp::Min => "min",
            NumericOp::Sum => "sum",
            NumericOp::Diff => "diff",
            NumericOp::Mul => "mul",
            NumericOp::Div => "div",
            NumericOp::Or => "or",
        }
    }

    fn arity_ok(self, n: usize) -> bool {
        match self {
            NumericOp::Diff | NumericOp::Div => n == 2,
            NumericOp::Or => n >= 2,
            _ => n >= 1,
        }
    }
}

impl fmt::Display for NumericOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const KEYWORDS: &[(&str, NumericOp)] = &[
    ("how many more", NumericOp::Diff),
    ("how many fewer", NumericOp::Diff),
    ("how much longer", NumericOp::Diff),
    ("higher", NumericOp::Max),
    ("highest", NumericOp::Max),
    ("largest", NumericOp::Max),
    ("most", NumericOp::Max),
    ("longer", NumericOp::Max),
    ("longest", NumericOp::Max),
    ("more", NumericOp::Max),
    ("later", NumericOp::Max),
    ("latest", NumericOp::Max),
    ("less", NumericOp::Min),
    ("lower", NumericOp::Min),
    ("lowest", NumericOp::Min),
    ("smallest", NumericOp::Min),
    ("fewest", NumericOp::Min),
    ("shorter", NumericOp::Min),
    ("shortest", NumericOp::Min),
    ("earlier", NumericOp::Min),
    ("earliest", NumericOp::Min),
    ("total", NumericOp::Sum),
    ("sum", NumericOp::Sum),
    ("combined", NumericOp::Sum),
    ("altogether", NumericOp::Sum),
    ("difference", NumericOp::Diff),
    ("product", NumericOp::Mul),
    ("times", NumericOp::Mul),
    ("multiplied", NumericOp::Mul),
    ("divided", NumericOp::Div),
    ("per", NumericOp::Div),
    ("ratio", NumericOp::Div),
    ("half", NumericOp::Div),
    ("either", NumericOp::Or),
    ("or", NumericOp::Or),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub op: NumericOp,
    pub operands: Vec<BigRational>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecOutcome {
    Success(String),
    ParseFailed,
    ExecFailed(String),
}

impl ExecOutcome {
    pub fn value(&self) -> Option<&str> {
        match self {
            ExecOutcome::Success(v) => Some(v),
            _ => None,
        }
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Multi-word keys are tried before single words; within each group the
/// earliest match in the text wins.
pub fn match_operator(final_sub_q: &str) -> Option<NumericOp> {
    let ws = words(final_sub_q);
    let earliest = |multi: bool| {
        KEYWORDS
            .iter()
            .filter(|(k, _)| k.contains(' ') == multi)
            .filter_map(|(k, op)| {
                let key: Vec<&str> = k.split(' ').collect();
                ws.windows(key.len())
                    .position(|w| w.iter().zip(&key).all(|(a, b)| a == b))
                    .map(|pos| (pos, *op))
            })
            .min_by_key(|(pos, _)| *pos)
            .map(|(_, op)| op)
    };
    earliest(true).or_else(|| earliest(false))
}

/// A decimal literal found in text: its byte span and exact value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NumberLiteral {
    pub start: usize,
    pub end: usize,
    pub value: BigRational,
}

/// All maximal decimal literals (optional sign, optional thousands commas,
/// optional fraction) in left-to-right order. A sign only counts when it is
/// not glued to a preceding word or number.
pub fn scan_numbers(text: &str) -> Vec<NumberLiteral> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if !b[i].is_ascii_digit() || (i > 0 && (b[i - 1].is_ascii_alphanumeric())) {
            i += 1;
            continue;
        }
        let mut start = i;
        let negative = i > 0
            && matches!(b[i - 1], b'-' | b'+')
            && (i == 1 || !(b[i - 2].is_ascii_alphanumeric() || b[i - 2] == b'.'));
        if negative {
            start = i - 1;
        }
        // integer part: plain digits, or 1-3 digits followed by ",ddd" groups
        let mut j = i;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        let mut int_digits: String = text[i..j].to_string();
        if j - i <= 3 {
            let mut k = j;
            while k + 3 < b.len()
                && b[k] == b','
                && b[k + 1..k + 4].iter().all(u8::is_ascii_digit)
                && (k + 4 == b.len() || !b[k + 4].is_ascii_digit())
            {
                int_digits.push_str(&text[k + 1..k + 4]);
                k += 4;
            }
            j = k;
        }
        let mut frac_digits = String::new();
        if j + 1 < b.len() && b[j] == b'.' && b[j + 1].is_ascii_digit() {
            let mut k = j + 1;
            while k < b.len() && b[k].is_ascii_digit() {
                k += 1;
            }
            frac_digits = text[j + 1..k].to_string();
            j = k;
        }
        let digits = format!("{int_digits}{frac_digits}");
        let mut value = BigRational::new(
            digits.parse::<BigInt>().expect("ascii digits"),
            BigInt::from(10u32).pow(frac_digits.len() as u32),
        );
        if negative && b[start] == b'-' {
            value = -value;
        }
        out.push(NumberLiteral {
            start,
            end: j,
            value,
        });
        i = j;
    }
    out
}

pub fn extract_operands(final_sub_q: &str) -> Vec<BigRational> {
    scan_numbers(final_sub_q).into_iter().map(|n| n.value).collect()
}

/// Integers without a decimal point; terminating fractions exactly;
/// anything else rounded half away from zero to [`MAX_FRACTION_DIGITS`].
pub fn render_number(value: &BigRational) -> String {
    if value.is_integer() {
        return value.to_integer().to_string();
    }
    let negative = value.is_negative();
    let abs = value.abs();
    let den = abs.denom().clone();
    let digits = terminating_digits(&den).unwrap_or(MAX_FRACTION_DIGITS);
    let scale = BigInt::from(10u32).pow(digits as u32);
    let scaled = &abs * BigRational::from_integer(scale.clone());
    let floor = scaled.to_integer();
    let rem = scaled - BigRational::from_integer(floor.clone());
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    let units = if rem >= half { floor + 1 } else { floor };
    let int_part = &units / &scale;
    let frac_part = &units % &scale;
    let mut frac = format!("{:0>width$}", frac_part.to_string(), width = digits);
    while frac.ends_with('0') {
        frac.pop();
    }
    let body = if frac.is_empty() {
        int_part.to_string()
    } else {
        format!("{int_part}.{frac}")
    };
    if negative && body.chars().any(|c| c.is_ascii_digit() && c != '0') {
        format!("-{body}")
    } else {
        body
    }
}

/// Number of fraction digits needed when `den` has only factors 2 and 5.
fn terminating_digits(den: &BigInt) -> Option<usize> {
    let two = BigInt::from(2);
    let five = BigInt::from(5);
    let mut d = den.clone();
    let (mut twos, mut fives) = (0usize, 0usize);
    while (&d % &two).is_zero() {
        d /= &two;
        twos += 1;
    }
    while (&d % &five).is_zero() {
        d /= &five;
        fives += 1;
    }
    d.is_one().then_some(twos.max(fives))
}

pub fn execute(p: &Program) -> ExecOutcome {
    if !p.op.arity_ok(p.operands.len()) {
        return ExecOutcome::ExecFailed(format!(
            "{} does not accept {} operand(s)",
            p.op,
            p.operands.len()
        ));
    }
    let xs = &p.operands;
    let value = match p.op {
        NumericOp::Max => xs.iter().max().cloned(),
        NumericOp::Min => xs.iter().min().cloned(),
        NumericOp::Sum => Some(xs.iter().fold(BigRational::zero(), |acc, x| acc + x)),
        NumericOp::Diff => Some(&xs[0] - &xs[1]),
        NumericOp::Mul => Some(xs.iter().fold(BigRational::one(), |acc, x| acc * x)),
        NumericOp::Div => {
            if xs[1].is_zero() {
                return ExecOutcome::ExecFailed("division by zero".into());
            }
            Some(&xs[0] / &xs[1])
        }
        NumericOp::Or => {
            let joined = xs.iter().map(render_number).collect::<Vec<_>>().join(" or ");
            return ExecOutcome::Success(joined);
        }
    };
    match value {
        Some(v) => ExecOutcome::Success(render_number(&v)),
        None => ExecOutcome::ExecFailed("no operands".into()),
    }
}

/// Total: every input maps to `Success`, `ParseFailed` or `ExecFailed`.
pub fn try_regex_pipeline(final_sub_q: &str) -> ExecOutcome {
    let Some(op) = match_operator(final_sub_q) else {
        return ExecOutcome::ParseFailed;
    };
    let operands = extract_operands(final_sub_q);
    if !op.arity_ok(operands.len()) {
        return ExecOutcome::ParseFailed;
    }
    execute(&Program { op, operands })
}

/// Lossy conversion used for feature extraction.
pub fn to_f64(value: &BigRational) -> f64 {
    value.to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(n: i64) -> BigRational {
        BigRational::from_integer(BigInt::from(n))
    }

    fn dec(s: &str) -> BigRational {
        extract_operands(s).pop().unwrap()
    }

    #[test]
    fn operator_table_anchors() {
        assert_eq!(match_operator("return the largest of 4 and 3"), Some(NumericOp::Max));
        assert_eq!(
            match_operator("return difference of 1606 and 1599"),
            Some(NumericOp::Diff)
        );
        assert_eq!(match_operator("return the capital of France"), None);
        assert_eq!(match_operator("which was higher"), Some(NumericOp::Max));
        assert_eq!(match_operator("which was less"), Some(NumericOp::Min));
    }

    #[test]
    fn multi_word_keys_win() {
        assert_eq!(
            match_operator("return how many more points than the lowest"),
            Some(NumericOp::Diff)
        );
        assert_eq!(match_operator("the most or the least"), Some(NumericOp::Max));
        assert_eq!(match_operator("return either 3 or 4"), Some(NumericOp::Or));
        // whole words only
        assert_eq!(match_operator("return the percent for Orlando"), None);
    }

    #[test]
    fn every_operator_reachable() {
        for (phrase, op) in [
            ("return the higher of 1 and 2", NumericOp::Max),
            ("return the lowest of 1 and 2", NumericOp::Min),
            ("return the total of 1 and 2", NumericOp::Sum),
            ("return difference of 1 and 2", NumericOp::Diff),
            ("return product of 1 and 2", NumericOp::Mul),
            ("return 1 divided by 2", NumericOp::Div),
            ("return 1 or 2", NumericOp::Or),
        ] {
            assert_eq!(match_operator(phrase), Some(op), "{phrase}");
        }
    }

    #[test]
    fn operand_extraction() {
        assert_eq!(extract_operands("return difference of 1606 and 1599"), vec![r(1606), r(1599)]);
        assert_eq!(
            extract_operands("return sum of 1,200 and 30.5"),
            vec![r(1200), BigRational::new(BigInt::from(61), BigInt::from(2))]
        );
        assert!(extract_operands("return the team").is_empty());
        assert_eq!(extract_operands("from -3 to 4"), vec![r(-3), r(4)]);
        assert_eq!(extract_operands("years 1990-1995"), vec![r(1990), r(1995)]);
        assert_eq!(extract_operands("a1 b2"), Vec::<BigRational>::new());
        assert_eq!(extract_operands("12,34"), vec![r(12), r(34)]);
        assert_eq!(extract_operands("1,234,567 ends."), vec![r(1234567)]);
        assert_eq!(extract_operands("4."), vec![r(4)]);
    }

    #[test]
    fn execution_anchors() {
        let run = |op, xs: Vec<BigRational>| execute(&Program { op, operands: xs });
        assert_eq!(run(NumericOp::Max, vec![r(4), r(3)]), ExecOutcome::Success("4".into()));
        assert_eq!(run(NumericOp::Min, vec![r(4), r(3)]), ExecOutcome::Success("3".into()));
        assert_eq!(
            run(NumericOp::Diff, vec![r(1606), r(1599)]),
            ExecOutcome::Success("7".into())
        );
        assert_eq!(run(NumericOp::Diff, vec![r(5), r(5)]), ExecOutcome::Success("0".into()));
        assert_eq!(run(NumericOp::Sum, vec![r(1200), dec("30.5")]), ExecOutcome::Success("1230.5".into()));
        assert_eq!(run(NumericOp::Mul, vec![dec("2.5"), r(4)]), ExecOutcome::Success("10".into()));
        assert_eq!(run(NumericOp::Div, vec![r(7), r(2)]), ExecOutcome::Success("3.5".into()));
        assert_eq!(run(NumericOp::Div, vec![r(1), r(3)]), ExecOutcome::Success("0.333333".into()));
        assert_eq!(run(NumericOp::Div, vec![r(2), r(3)]), ExecOutcome::Success("0.666667".into()));
        assert_eq!(run(NumericOp::Or, vec![r(4), r(3)]), ExecOutcome::Success("4 or 3".into()));
        assert!(matches!(run(NumericOp::Div, vec![r(1), r(0)]), ExecOutcome::ExecFailed(_)));
        assert!(matches!(run(NumericOp::Diff, vec![r(1)]), ExecOutcome::ExecFailed(_)));
        assert!(matches!(run(NumericOp::Or, vec![r(1)]), ExecOutcome::ExecFailed(_)));
        assert!(matches!(run(NumericOp::Sum, vec![]), ExecOutcome::ExecFailed(_)));
    }

    #[test]
    fn rendering() {
        assert_eq!(render_number(&dec("-0.0000001")), "-0.0000001");
        assert_eq!(render_number(&(r(-1) / r(3000000))), "0");
        assert_eq!(render_number(&(r(-2) / r(3))), "-0.666667");
        assert_eq!(render_number(&dec("12.50")), "12.5");
        assert_eq!(render_number(&r(-7)), "-7");
    }

    #[test]
    fn pipeline() {
        assert_eq!(
            try_regex_pipeline("return the largest of 4 and 3"),
            ExecOutcome::Success("4".into())
        );
        assert_eq!(try_regex_pipeline("return the capital of France"), ExecOutcome::ParseFailed);
        assert_eq!(try_regex_pipeline("return difference of 7"), ExecOutcome::ParseFailed);
        assert!(matches!(
            try_regex_pipeline("return 5 divided by 0"),
            ExecOutcome::ExecFailed(_)
        ));
    }

    proptest! {
        #[test]
        fn pipeline_is_total(s in "\\PC{0,40}") {
            let _ = try_regex_pipeline(&s);
        }

        #[test]
        fn commutative_ops_ignore_order(
            xs in proptest::collection::vec(-10_000i64..10_000, 1..5),
            op_idx in 0usize..4,
            seed in any::<u64>(),
        ) {
            let op = [NumericOp::Max, NumericOp::Min, NumericOp::Sum, NumericOp::Mul][op_idx];
            let ops: Vec<BigRational> = xs.iter().map(|&x| r(x) / r(100)).collect();
            let mut shuffled = ops.clone();
            let len = shuffled.len();
            shuffled.rotate_left((seed as usize) % len);
            if len > 1 && seed % 2 == 0 {
                shuffled.swap(0, len - 1);
            }
            prop_assert_eq!(
                execute(&Program { op, operands: ops }),
                execute(&Program { op, operands: shuffled })
            );
        }
    }
}
