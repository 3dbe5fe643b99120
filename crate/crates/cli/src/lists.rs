//! Parsing of list-valued flags: `2`, `2,4`, `2..6` (inclusive), `1e6`.

/// Parses one integer, accepting exponent notation when the value is integral.
pub fn parse_int(s: &str) -> Result<u64, String> {
    let s = s.trim();
    if let Ok(n) = s.parse::<u64>() {
        return Ok(n);
    }
    match s.parse::<f64>() {
        Ok(x) if x >= 0.0 && x.fract() == 0.0 && x <= u64::MAX as f64 => Ok(x as u64),
        _ => Err(format!("expected a non-negative integer, got {s:?}")),
    }
}

pub fn parse_list(s: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        match item.split_once("..") {
            Some((a, b)) => {
                let (a, b) = (parse_int(a)?, parse_int(b.trim_start_matches('='))?);
                if a > b {
                    return Err(format!("empty range {item:?}"));
                }
                out.extend(a..=b);
            }
            None => out.push(parse_int(item)?),
        }
    }
    if out.is_empty() {
        return Err(format!("empty list {s:?}"));
    }
    Ok(out)
}

pub fn parse_usizes(s: &str) -> Result<Vec<usize>, String> {
    parse_list(s)?.into_iter().map(|x| usize::try_from(x).map_err(|e| e.to_string())).collect()
}

pub fn parse_u32s(s: &str) -> Result<Vec<u32>, String> {
    parse_list(s)?.into_iter().map(|x| u32::try_from(x).map_err(|e| e.to_string())).collect()
}

/// Comma-separated words through `FromStr`.
pub fn parse_words<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(|w| w.parse::<T>().map_err(|e| e.to_string())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forms() {
        assert_eq!(parse_list("2..6").unwrap(), vec![2, 3, 4, 5, 6]);
        assert_eq!(parse_list("2..=3").unwrap(), vec![2, 3]);
        assert_eq!(parse_list("1024,65536").unwrap(), vec![1024, 65536]);
        assert_eq!(parse_list("1e6").unwrap(), vec![1_000_000]);
        assert_eq!(parse_list("0").unwrap(), vec![0]);
        assert_eq!(parse_list(" 4 , 8..9 ").unwrap(), vec![4, 8, 9]);
    }

    #[test]
    fn rejects() {
        for bad in ["", "x", "-1", "1.5", "6..2", "2..", "1e400"] {
            assert!(parse_list(bad).is_err(), "{bad}");
        }
    }
}
