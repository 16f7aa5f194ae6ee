//! Dotted configuration flags (`--losses.tau 0.2`, `--optim.base_lr=1e-3`).
//! They are pulled out of argv before clap sees the rest.

pub fn split_dotted(argv: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(argv.len());
    let mut dotted = Vec::new();
    let mut it = argv.into_iter().peekable();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = inline.or_else(|| it.next_if(|v| !v.starts_with("--")));
        dotted.push((name.to_string(), value.unwrap_or_else(|| "true".into())));
    }
    (rest, dotted)
}

/// Parses `key=value` pairs given with `--set`.
pub fn parse_set(items: &[String]) -> Result<Vec<(String, String)>, String> {
    items
        .iter()
        .map(|s| s.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| format!("--set expects KEY=VALUE, got {s}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn dotted_flags_are_extracted() {
        let (rest, d) = split_dotted(args("neuropt pretrain --data d --losses.tau 0.2 --optim.base_lr=1e-3 --out o"));
        assert_eq!(rest, args("neuropt pretrain --data d --out o"));
        assert_eq!(d, vec![("losses.tau".into(), "0.2".into()), ("optim.base_lr".into(), "1e-3".into())]);
    }

    #[test]
    fn negative_values_and_bare_flags() {
        let (_, d) = split_dotted(args("x --augment.jitter_shift -0.1 --data.standardize_targets --out o"));
        assert_eq!(d, vec![("augment.jitter_shift".into(), "-0.1".into()), ("data.standardize_targets".into(), "true".into())]);
    }

    #[test]
    fn set_pairs() {
        assert_eq!(parse_set(&["seed=3".into()]).unwrap(), vec![("seed".into(), "3".into())]);
        assert!(parse_set(&["seed".into()]).is_err());
    }
}
