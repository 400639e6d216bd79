use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::ast::{Expr, ExprKind, Pos};
use super::eval::{
    apply_thunk, coerce_to_str, equal, force, impurity_mark, type_error, value_thunk, Ctx, Env, EvalError, EvalResult,
    IMPURE_IN_SHELL, IMPURE_SYS_VERSION,
};
use super::value::{Attrs, AttrsEq, DerivationValue, PrimOp, Str, StrCtx, Value};
use crate::archive::Tree;
use crate::derivation::{fill_outputs, Derivation, FixedOutput};
use crate::store_path::{sha256_hex, StorePath};

const PRIMOPS: &[(&str, usize)] = &[
    ("attrNames", 1),
    ("concatStringsSep", 2),
    ("derivation", 1),
    ("elem", 2),
    ("fetchFile", 1),
    ("filter", 2),
    ("head", 1),
    ("length", 1),
    ("map", 2),
    ("throw", 1),
    ("toFile", 2),
    ("toString", 1),
];

const CONSTANTS: &[&str] = &["bootstrapTools", "builtins", "inShell", "sysVersion"];

/// Attributes of a derivation call that are not passed to the builder.
const NON_ENV_ATTRS: &[&str] = &["args", "meta", "passthru", "recurseForDerivations"];

pub const DEFAULT_FETCH_SCRIPT: &str = r#"cp "$MFPM_SOURCE_MIRROR/$mirrorKey" "$out""#;

pub(crate) fn global(ctx: &Ctx, name: &str) -> Option<EvalResult> {
    if let Some((name, arity)) = PRIMOPS.iter().find(|(n, _)| *n == name) {
        return Some(Ok(Value::PrimOp(Arc::new(PrimOp {
            name,
            arity: *arity,
            args: Vec::new(),
        }))));
    }
    let v = match name {
        "sysVersion" => {
            impurity_mark(IMPURE_SYS_VERSION);
            Value::str(ctx.config.sys_version.clone())
        }
        "inShell" => {
            impurity_mark(IMPURE_IN_SHELL);
            Value::Bool(ctx.config.in_shell)
        }
        "bootstrapTools" => Value::Str(Arc::new(Str {
            text: ctx.bootstrap.to_string(),
            ctx: BTreeSet::from([StrCtx::Source(ctx.bootstrap.clone())]),
        })),
        "builtins" => {
            let env = Env::root();
            let attrs: Attrs = PRIMOPS
                .iter()
                .map(|(n, _)| *n)
                .chain(CONSTANTS.iter().copied())
                .map(|n| {
                    let e = Arc::new(Expr {
                        kind: ExprKind::BuiltinRef(n.to_string()),
                        pos: Pos::default(),
                    });
                    (n.to_string(), super::eval::expr_thunk(&e, &env))
                })
                .collect();
            Value::Attrs(Arc::new(attrs))
        }
        _ => return None,
    };
    Some(Ok(v))
}

fn list(ctx: &Ctx, t: &super::eval::Thunk, pos: Pos) -> Result<Arc<Vec<super::eval::Thunk>>, EvalError> {
    match force(ctx, t)? {
        Value::List(l) => Ok(l),
        other => Err(type_error(pos, "a list", &other)),
    }
}

fn attrs(ctx: &Ctx, t: &super::eval::Thunk, pos: Pos) -> Result<Arc<Attrs>, EvalError> {
    match force(ctx, t)? {
        Value::Attrs(a) => Ok(a),
        other => Err(type_error(pos, "an attribute set", &other)),
    }
}

fn string(ctx: &Ctx, t: &super::eval::Thunk, pos: Pos) -> Result<Arc<Str>, EvalError> {
    match force(ctx, t)? {
        Value::Str(s) => Ok(s),
        other => Err(type_error(pos, "a string", &other)),
    }
}

pub(crate) fn call(ctx: &Ctx, name: &str, args: &[super::eval::Thunk], pos: Pos) -> EvalResult {
    match name {
        "attrNames" => {
            let a = attrs(ctx, &args[0], pos)?;
            Ok(Value::List(Arc::new(
                a.keys().map(|k| value_thunk(Value::str(k.clone()))).collect(),
            )))
        }
        "concatStringsSep" => {
            let sep = string(ctx, &args[0], pos)?;
            let items = list(ctx, &args[1], pos)?;
            let mut out = Str::default();
            for (i, t) in items.iter().enumerate() {
                let s = coerce_to_str(ctx, &force(ctx, t)?, pos)?;
                if i > 0 {
                    out.text.push_str(&sep.text);
                }
                out.text.push_str(&s.text);
                out.ctx.extend(s.ctx);
            }
            out.ctx.extend(sep.ctx.iter().cloned());
            Ok(Value::Str(Arc::new(out)))
        }
        "derivation" => derivation(ctx, attrs(ctx, &args[0], pos)?, pos),
        "elem" => {
            let x = force(ctx, &args[0])?;
            for t in list(ctx, &args[1], pos)?.iter() {
                if equal(ctx, &x, &force(ctx, t)?)? {
                    return Ok(Value::Bool(true));
                }
            }
            Ok(Value::Bool(false))
        }
        "fetchFile" => fetch_file(ctx, attrs(ctx, &args[0], pos)?, pos),
        "filter" => {
            let f = force(ctx, &args[0])?;
            let mut kept = Vec::new();
            for t in list(ctx, &args[1], pos)?.iter() {
                match super::eval::apply(ctx, f.clone(), t.clone(), pos)? {
                    Value::Bool(true) => kept.push(t.clone()),
                    Value::Bool(false) => {}
                    other => return Err(type_error(pos, "a Boolean", &other)),
                }
            }
            Ok(Value::List(Arc::new(kept)))
        }
        "head" => match list(ctx, &args[0], pos)?.first() {
            Some(t) => force(ctx, t),
            None => Err(EvalError::at(pos, "`head` called on an empty list")),
        },
        "length" => Ok(Value::Int(list(ctx, &args[0], pos)?.len() as i64)),
        "map" => {
            let items = list(ctx, &args[1], pos)?;
            Ok(Value::List(Arc::new(
                items
                    .iter()
                    .map(|t| apply_thunk(args[0].clone(), t.clone(), pos))
                    .collect(),
            )))
        }
        "throw" => {
            let msg = coerce_to_str(ctx, &force(ctx, &args[0])?, pos)?;
            Err(EvalError::at(pos, format!("thrown: {}", msg.text)))
        }
        "toFile" => {
            let name = string(ctx, &args[0], pos)?;
            let contents = string(ctx, &args[1], pos)?;
            if !contents.ctx.is_empty() {
                return Err(EvalError::at(pos, "`toFile` contents may not refer to store paths"));
            }
            let path = ctx
                .store
                .add_tree(&name.text, &Tree::file(contents.text.clone()))
                .map_err(|e| EvalError::at(pos, e.to_string()))?;
            Ok(Value::Str(Arc::new(Str {
                text: path.to_string(),
                ctx: BTreeSet::from([StrCtx::Source(path)]),
            })))
        }
        "toString" => Ok(Value::Str(Arc::new(coerce_to_str(ctx, &force(ctx, &args[0])?, pos)?))),
        _ => Err(EvalError::at(pos, format!("unknown primop `{name}`"))),
    }
}

fn fetch_file(ctx: &Ctx, args: Arc<Attrs>, pos: Pos) -> EvalResult {
    let get = |k: &str| args.get(k).map(|t| string(ctx, t, pos)).transpose();
    let url = get("url")?.ok_or_else(|| EvalError::at(pos, "fetchFile: `url` is required"))?;
    let hash = get("sha256")?.ok_or_else(|| EvalError::at(pos, "fetchFile: `sha256` is required"))?;
    let name = match get("name")? {
        Some(n) => n.text.clone(),
        None => url.text.rsplit('/').next().unwrap_or_default().to_string(),
    };
    let script = match args.get("builderScript") {
        Some(t) => (*string(ctx, t, pos)?).clone(),
        None => Str::plain(DEFAULT_FETCH_SCRIPT),
    };
    let builder = Str {
        text: format!("{}/bin/sh", ctx.bootstrap),
        ctx: BTreeSet::from([StrCtx::Source(ctx.bootstrap.clone())]),
    };
    let s = |v: Str| value_thunk(Value::Str(Arc::new(v)));
    let drv_args: Attrs = BTreeMap::from([
        ("name".to_string(), s(Str::plain(name))),
        ("builder".to_string(), s(builder)),
        (
            "args".to_string(),
            value_thunk(Value::List(Arc::new(vec![s(Str::plain("-c")), s(script)]))),
        ),
        ("url".to_string(), s((*url).clone())),
        ("mirrorKey".to_string(), s(Str::plain(sha256_hex(&url.text)))),
        ("outputHash".to_string(), s((*hash).clone())),
        ("outputHashAlgo".to_string(), s(Str::plain("sha256"))),
    ]);
    derivation(ctx, Arc::new(drv_args), pos)
}

fn derivation(ctx: &Ctx, args: Arc<Attrs>, pos: Pos) -> EvalResult {
    let mut context: BTreeSet<StrCtx> = BTreeSet::new();
    let take = |s: Str, context: &mut BTreeSet<StrCtx>| {
        context.extend(s.ctx);
        s.text
    };
    let attr_err = |k: &str, e: EvalError| EvalError {
        pos: e.pos.or(Some(pos)),
        message: format!("while evaluating derivation attribute `{k}`: {}", e.message),
    };
    let required = |k: &str| {
        args.get(k)
            .ok_or_else(|| EvalError::at(pos, format!("derivation: required attribute `{k}` missing")))
    };

    let name = string(ctx, required("name")?, pos).map_err(|e| attr_err("name", e))?;
    let name = name.text.clone();
    let builder = coerce_to_str(ctx, &force(ctx, required("builder")?)?, pos).map_err(|e| attr_err("builder", e))?;
    let builder = take(builder, &mut context);

    let mut drv_args = Vec::new();
    if let Some(t) = args.get("args") {
        for item in list(ctx, t, pos).map_err(|e| attr_err("args", e))?.iter() {
            let s = force(ctx, item)
                .and_then(|v| coerce_to_str(ctx, &v, pos))
                .map_err(|e| attr_err("args", e))?;
            drv_args.push(take(s, &mut context));
        }
    }

    let mut outputs = vec!["out".to_string()];
    if let Some(t) = args.get("outputs") {
        outputs = list(ctx, t, pos)
            .and_then(|l| {
                l.iter()
                    .map(|o| string(ctx, o, pos).map(|s| s.text.clone()))
                    .collect::<Result<Vec<_>, _>>()
            })
            .map_err(|e| attr_err("outputs", e))?;
    }

    let mut env = BTreeMap::new();
    for (k, t) in args.iter() {
        if NON_ENV_ATTRS.contains(&k.as_str()) {
            continue;
        }
        if k.contains('=') {
            return Err(EvalError::at(
                pos,
                format!("derivation: invalid environment name `{k}`"),
            ));
        }
        let v = force(ctx, t).map_err(|e| attr_err(k, e))?;
        if matches!(v, Value::Attrs(_) | Value::Closure(_) | Value::PrimOp(_)) {
            return Err(attr_err(
                k,
                EvalError::at(pos, format!("cannot pass {} to a builder", v.type_name())),
            ));
        }
        let s = coerce_to_str(ctx, &v, pos).map_err(|e| attr_err(k, e))?;
        env.insert(k.clone(), take(s, &mut context));
    }

    let fixed_output = env.get("outputHash").map(|h| FixedOutput {
        hash_algo: env.get("outputHashAlgo").cloned().unwrap_or_else(|| "sha256".into()),
        content_digest: h.clone(),
    });

    let mut drv = Derivation::new(name.clone(), builder);
    drv.args = drv_args;
    drv.env = env;
    drv.fixed_output = fixed_output;
    drv.outputs = outputs.iter().map(|o| (o.clone(), None)).collect();
    for c in context {
        match c {
            StrCtx::Output { drv: p, output } => {
                drv.input_drvs.entry(p).or_default().insert(output);
            }
            StrCtx::Source(p) => {
                drv.input_srcs.insert(p);
            }
        }
    }

    let named = |e: String| EvalError::at(pos, format!("derivation `{name}`: {e}"));
    fill_outputs(&mut drv, ctx, &ctx.modulo).map_err(|e| named(e.to_string()))?;
    let drv_path = ctx.store.write_derivation(&drv).map_err(|e| named(e.to_string()))?;
    let output_paths: BTreeMap<String, StorePath> = drv.output_paths().map_err(|e| named(e.to_string()))?;
    ctx.drvs
        .lock()
        .expect("drv map poisoned")
        .insert(drv_path.clone(), Arc::new(drv));
    Ok(Value::Derivation(Arc::new(DerivationValue {
        drv_path,
        outputs: output_paths,
        selected: "out".into(),
        attrs: Arc::new(AttrsEq((*args).clone())),
    })))
}

#[cfg(test)]
mod tests {
    use super::super::eval::{EvalConfig, Evaluator};
    use super::*;
    use crate::store::Store;

    fn evaluator(config: EvalConfig) -> (tempfile::TempDir, Evaluator) {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(Store::open(dir.path().join("store")).unwrap());
        (dir, Evaluator::new(store, config).unwrap())
    }

    const NANO: &str = r#"
let
  stdenv = {
    mkDerivation = args: derivation ({
      builder = "${bootstrapTools}/bin/sh";
      args = [ "-c" "mkdir -p $out" ];
    } // args);
  };
  fetchFile' = fetchFile;
  ncurses = stdenv.mkDerivation { name = "ncurses-6.4"; outputs = [ "out" "dev" ]; };
  nano = { stdenv, fetchFile, ncurses }:
    stdenv.mkDerivation rec {
      pname = "nano";
      version = "7.2";
      name = "${pname}-${version}";
      src = fetchFile {
        url = "mirror://gnu/nano/${name}.tar.xz";
        sha256 = "86f3442768bd2873cec693f83cdf80b4b444ad3cc14760b74361474fc87a4526";
      };
      buildInputs = [ ncurses.dev ];
      configureFlags = [ "--sysconfdir=/etc" ];
    };
in nano { inherit stdenv ncurses; fetchFile = fetchFile'; }
"#;

    #[test]
    fn nano_style_recipe_yields_expected_derivation() {
        let (_d, ev) = evaluator(EvalConfig::default());
        let (v, impure) = ev.eval_source(NANO).unwrap();
        assert!(impure.is_empty());
        let d = v.as_derivation().expect("derivation value").clone();
        assert!(ev.store().has_path(&d.drv_path));
        let drv = ev.store().read_derivation(&d.drv_path).unwrap();
        assert_eq!(drv.env["name"], "nano-7.2");
        assert_eq!(drv.env["configureFlags"], "--sysconfdir=/etc");
        assert_eq!(d.drv_path.name(), "nano-7.2.drv");
        let input_names: Vec<_> = drv.input_drvs.keys().map(|p| p.name().to_string()).collect();
        assert_eq!(input_names.len(), 2);
        assert!(input_names.contains(&"nano-7.2.tar.xz.drv".to_string()));
        assert!(input_names.contains(&"ncurses-6.4.drv".to_string()));
        let ncurses_outs = drv
            .input_drvs
            .iter()
            .find(|(p, _)| p.name() == "ncurses-6.4.drv")
            .unwrap()
            .1;
        assert_eq!(ncurses_outs, &BTreeSet::from(["dev".to_string()]));
        assert!(drv.env["buildInputs"].ends_with("-ncurses-6.4-dev"));
        assert_eq!(drv.input_srcs.len(), 1);
    }

    #[test]
    fn fetch_file_is_fixed_output_with_mirror_key() {
        let (_d, ev) = evaluator(EvalConfig::default());
        let (v, _) = ev
            .eval_source(r#"fetchFile { url = "http://x/a.tar"; sha256 = "00"; }"#)
            .unwrap();
        let d = v.as_derivation().unwrap();
        let drv = ev.store().read_derivation(&d.drv_path).unwrap();
        assert_eq!(drv.name, "a.tar");
        assert_eq!(drv.env["mirrorKey"], sha256_hex("http://x/a.tar"));
        assert_eq!(drv.args[1], DEFAULT_FETCH_SCRIPT);
        let fixed = drv.fixed_output.unwrap();
        assert_eq!(
            (fixed.hash_algo.as_str(), fixed.content_digest.as_str()),
            ("sha256", "00")
        );
    }

    #[test]
    fn missing_derivation_attribute_is_an_error() {
        let (_d, ev) = evaluator(EvalConfig::default());
        let err = ev.eval_source(r#"derivation { name = "x"; }"#).unwrap_err();
        assert!(err.message.contains("`builder` missing"), "{}", err.message);
    }

    #[test]
    fn derivation_selection_and_coercion() {
        let (_d, ev) = evaluator(EvalConfig::default());
        let src = r#"
let d = derivation { name = "m"; builder = "/bin/sh"; outputs = [ "out" "dev" ]; meta.x = 1; };
in [ d.dev.outPath d.outPath "${d}" d.type d.meta.x d.name ]"#;
        let (v, _) = ev.eval_source(src).unwrap();
        let Value::List(items) = v else { panic!() };
        let vals: Vec<_> = items.iter().map(|t| ev.force(t).unwrap()).collect();
        let dev = vals[0].as_str().unwrap();
        let out = vals[1].as_str().unwrap();
        assert!(dev.ends_with("-m-dev"));
        assert!(out.ends_with("-m"));
        assert_eq!(vals[2].as_str().unwrap(), out);
        assert_eq!(vals[3].as_str(), Some("derivation"));
        assert!(matches!(vals[4], Value::Int(1)));
        assert_eq!(vals[5].as_str(), Some("m"));
    }
}
