#!/usr/bin/env python3
"""Regenerate the bundled revision corpus (rev1..rev3, mirror/, revisions.tsv).

rev2 differs from rev1 only in the fetcher's builder script; rev3 bumps zlib.
"""

import hashlib
import pathlib
import shutil

HERE = pathlib.Path(__file__).resolve().parent
URL_BASE = "https://mirror.example.org/src"

FETCHER_SCRIPTS = {
    "rev1": 'cp "$MFPM_SOURCE_MIRROR/$mirrorKey" "$out"',
    "rev2": 'cat "$MFPM_SOURCE_MIRROR/$mirrorKey" > "$out"',
    "rev3": 'cat "$MFPM_SOURCE_MIRROR/$mirrorKey" > "$out"',
}
ZLIB_VERSION = {"rev1": "1.2.11", "rev2": "1.2.11", "rev3": "1.2.13"}
TIMESTAMPS = {"rev1": 1506816000, "rev2": 1507752000, "rev3": 1508688000}

# (attribute, pname, version, deps, extra); version None means the revision's zlib version
PACKAGES = [
    ("zlib", "zlib", None, [], {}),
    ("bzip2", "bzip2", "1.0.6", [], {}),
    ("xz", "xz", "5.2.3", [], {}),
    ("gmp", "gmp", "6.1.2", [], {}),
    ("mpfr", "mpfr", "3.1.6", ["gmp"], {}),
    ("libffi", "libffi", "3.2.1", [], {}),
    ("expat", "expat", "2.2.4", [], {}),
    ("pcre", "pcre", "8.41", [], {}),
    ("ncurses", "ncurses", "6.0", [], {"outputs": ["out", "dev"]}),
    ("readline", "readline", "7.0", ["ncurses"], {}),
    ("libxml2", "libxml2", "2.9.5", ["zlib", "xz"], {}),
    ("openssl", "openssl", "1.0.2l", ["zlib"], {"outputs": ["out", "dev"]}),
    ("sqlite", "sqlite", "3.20.0", ["readline"], {}),
    ("curl", "curl", "7.55.1", ["openssl.dev", "zlib"], {}),
    ("libssh2", "libssh2", "1.8.0", ["openssl.dev"], {}),
    ("git", "git", "2.14.2", ["curl", "expat", "pcre"], {}),
    ("hub", "hub", "2.2.9", ["git"], {}),
    ("tig", "tig", "2.2.2", ["git", "ncurses"], {}),
    ("bash", "bash", "4.4", ["readline"], {}),
    ("coreutils", "coreutils", "8.28", ["gmp"], {}),
    ("findutils", "findutils", "4.6.0", [], {}),
    ("diffutils", "diffutils", "3.6", [], {}),
    ("gnused", "gnused", "4.4", [], {}),
    ("gnugrep", "gnugrep", "3.1", ["pcre"], {}),
    ("gawk", "gawk", "4.1.4", ["readline"], {}),
    ("gnumake", "gnumake", "4.2.1", [], {}),
    ("patch", "patch", "2.7.5", [], {}),
    ("which", "which", "2.21", [], {}),
    ("less", "less", "487", ["ncurses"], {}),
    ("nano", "nano", "2.8.7", ["ncurses.dev"], {"configureFlags": ["--sysconfdir=/etc"]}),
    ("vim", "vim", "8.0.1176", ["ncurses"], {}),
    ("libevent", "libevent", "2.1.8", ["openssl.dev"], {}),
    ("tmux", "tmux", "2.6", ["libevent", "ncurses"], {}),
    ("oniguruma", "oniguruma", "6.6.1", [], {}),
    ("jq", "jq", "1.5", ["oniguruma"], {}),
    ("file", "file", "5.32", ["zlib"], {}),
    ("tree", "tree", "1.7.0", [], {}),
    ("htop", "htop", "2.0.2", ["ncurses"], {}),
    ("wget", "wget", "1.19.1", ["openssl.dev", "pcre"], {}),
    ("rsync", "rsync", "3.1.2", ["openssl.dev", "xz"], {}),
    ("gnutar", "gnutar", "1.29", [], {}),
    ("gzip", "gzip", "1.8", [], {}),
    ("lz4", "lz4", "1.8.0", [], {}),
    ("zstd", "zstd", "1.3.1", [], {}),
    ("hello", "hello", "2.10", [], {}),
    ("perl", "perl", "5.24.3", ["zlib"], {}),
    ('"python3.9"', "python", "3.9.1", ["zlib", "openssl.dev", "sqlite", "libffi", "readline", "expat"], {}),
]
PERL_PACKAGES = [("JSON", "2.94"), ("YAML", "1.23"), ("TextDiff", "1.45")]
SOURCE_JOBS = ["zlib", "openssl", "hello"]


def source_body(pname, version):
    return f"{pname}-{version} source tarball\n".encode()


def url_of(pname, version):
    return f"{URL_BASE}/{pname}-{version}.tar"


def nix_list(items):
    return "[ " + " ".join(items) + " ]" if items else "[ ]"


def render(rev):
    zv = ZLIB_VERSION[rev]
    lines = []
    w = lines.append
    w("# Package set snapshot. Top-level attributes that evaluate to derivations are jobs.")
    w("let")
    w('  sh = "${bootstrapTools}/bin/sh";')
    w("")
    w(f"  fetcherScript = ''{FETCHER_SCRIPTS[rev]}'';")
    w("  fetch = { pname, version, sha256 }: fetchFile {")
    w(f'    url = "{URL_BASE}/${{pname}}-${{version}}.tar";')
    w("    inherit sha256;")
    w("    builderScript = fetcherScript;")
    w("  };")
    w("")
    w("  genericBuild = ''")
    w("    set -e")
    w("    mkdir -p $out/bin $out/share/doc")
    w("    cp $src $out/share/doc/source")
    w("    : > $out/share/doc/deps")
    w("    for d in $deps; do echo \"$d\" >> $out/share/doc/deps; done")
    w("    printf '#!/bin/sh\\necho %s %s\\n' \"$pname\" \"$version\" > $out/bin/$pname")
    w("    chmod +x $out/bin/$pname")
    w("    if [ -n \"$dev\" ]; then")
    w("      mkdir -p $dev/include")
    w("      echo \"$pname dev\" > $dev/include/$pname.h")
    w("    fi")
    w("  '';")
    w("")
    w("  mkPkg = { pname, version, sha256, deps ? [ ], outputs ? [ \"out\" ], extra ? { } }:")
    w("    derivation ({")
    w('      name = "${pname}-${version}";')
    w("      builder = sh;")
    w("      args = [ \"-c\" genericBuild ];")
    w("      src = fetch { inherit pname version sha256; };")
    w("      inherit pname version deps outputs;")
    w("    } // extra);")
    w("")
    sources = {}
    for attr, pname, version, deps, extra in PACKAGES:
        version = version or zv
        body = source_body(pname, version)
        sources[pname] = (version, hashlib.sha256(body).hexdigest())
        fields = [f'pname = "{pname}";', f'version = "{version}";', f'sha256 = "{sources[pname][1]}";']
        if deps:
            fields.append(f"deps = {nix_list(deps)};")
        if "outputs" in extra:
            fields.append(f"outputs = {nix_list(chr(34) + x + chr(34) for x in extra['outputs'])};")
        flags = {k: v for k, v in extra.items() if k != "outputs"}
        if flags:
            inner = " ".join(f"{k} = {nix_list(chr(34) + x + chr(34) for x in v)};" for k, v in flags.items())
            fields.append(f"extra = {{ {inner} }};")
        name = attr.strip('"').replace(".", "_") if attr.startswith('"') else attr
        w(f"  {name} = mkPkg {{ {' '.join(fields)} }};")
    w("")
    for pname, version in PERL_PACKAGES:
        full = f"perl-{pname}"
        body = source_body(full, version)
        sources[full] = (version, hashlib.sha256(body).hexdigest())
        w(f'  perl{pname} = mkPkg {{ pname = "{full}"; version = "{version}"; '
          f'sha256 = "{sources[full][1]}"; deps = [ perl ]; }};')
    w("in")
    w("{")
    for attr, *_ in PACKAGES:
        if attr.startswith('"'):
            w(f"  {attr} = {attr.strip(chr(34)).replace('.', '_')};")
        else:
            w(f"  inherit {attr};")
    w("")
    w("  perlPackages = {")
    w("    recurseForDerivations = true;")
    for pname, _ in PERL_PACKAGES:
        w(f"    {pname} = perl{pname};")
    w("  };")
    w("")
    w("  sources = {")
    w("    recurseForDerivations = true;")
    for pname in SOURCE_JOBS:
        version, digest = sources[pname]
        w(f'    {pname} = fetch {{ pname = "{pname}"; version = "{version}"; sha256 = "{digest}"; }};')
    w("  };")
    w("")
    w("  # Output depends on the evaluator's version string.")
    w("  impure-version = derivation {")
    w('    name = "impure-version";')
    w("    builder = sh;")
    w('    args = [ "-c" "echo evaluated by ${builtins.sysVersion} > $out" ];')
    w("  };")
    w("")
    w("  # Output depends on whether evaluation happens inside a shell.")
    w("  impure-shell = derivation {")
    w('    name = "impure-shell";')
    w("    builder = sh;")
    w('    args = [ "-c" (if builtins.inShell then "echo interactive > $out" else "echo batch > $out") ];')
    w("  };")
    w("")
    w("  # Refuses to build unless the host looks like the expected distribution.")
    w("  leaky-current = derivation {")
    w('    name = "leaky-current-1.0";')
    w("    builder = sh;")
    w("    args = [ \"-c\" ''")
    w("      os=\"$OS_NAME\"")
    w("      if [ -z \"$os\" ]; then os=\"$(uname -s)\"; fi")
    w("      case \"$os\" in")
    w("        NixOS*) echo ok > $out ;;")
    w("        *) echo \"REJECT-HOST-INFO: OS_NAME $os\"; exit 1 ;;")
    w("      esac")
    w("    '' ];")
    w("  };")
    w("")
    w("  # Needs a variable only the old sandbox provided.")
    w("  leaky-past = derivation {")
    w('    name = "leaky-past-1.0";')
    w("    builder = sh;")
    w("    args = [ \"-c\" ''")
    w("      if [ -z \"$KERNEL_VERSION\" ]; then echo \"MISSING-ENV:KERNEL_VERSION\"; exit 1; fi")
    w("      echo kernel-checked > $out")
    w("    '' ];")
    w("  };")
    w("")
    w("  # Test suite that fails for some seeds.")
    w("  flaky-one = derivation {")
    w('    name = "flaky-one-0.3";')
    w("    builder = sh;")
    w("    threshold = \"200\";")
    w("    args = [ \"-c\" ''")
    w("      seed=$(cat .seed)")
    w("      echo \"running tests with seed $seed\"")
    w("      if [ \"$seed\" -ge \"$threshold\" ]; then echo \"test_timeout FAILED\"; exit 1; fi")
    w("      echo tests-passed > $out")
    w("    '' ];")
    w("  };")
    w("")
    w("  known-broken = derivation {")
    w('    name = "known-broken-0.1";')
    w("    builder = sh;")
    w("    args = [ \"-c\" \"echo 'error: unsupported compiler'; exit 2\" ];")
    w("  };")
    w("")
    w("  darwin-only = derivation {")
    w('    name = "darwin-only-1.0";')
    w("    builder = sh;")
    w("    args = [ \"-c\" \"echo > $out\" ];")
    w('    meta.platforms = [ "x86_64-darwin" "aarch64-darwin" ];')
    w("  };")
    w("")
    w('  eval-broken = throw "this package is marked as broken";')
    w("}")
    return "\n".join(lines) + "\n", sources


def main():
    mirror = HERE / "mirror"
    if mirror.exists():
        shutil.rmtree(mirror)
    mirror.mkdir()
    manifest = []
    for rev in ["rev1", "rev2", "rev3"]:
        text, sources = render(rev)
        d = HERE / rev
        d.mkdir(exist_ok=True)
        (d / "default.rcp").write_text(text)
        for pname, (version, _) in sources.items():
            key = hashlib.sha256(url_of(pname, version).encode()).hexdigest()
            (mirror / key).write_bytes(source_body(pname, version))
        manifest.append(f"{TIMESTAMPS[rev]}\t{rev}")
    (HERE / "revisions.tsv").write_text("\n".join(manifest) + "\n")


if __name__ == "__main__":
    main()
