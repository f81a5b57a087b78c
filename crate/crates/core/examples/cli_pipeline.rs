//! Drives the command-line interface in-process with small settings:
//! gen-data, train-codec, train, decompose, recompose, eval.
//!
//! cargo run --release --example cli_pipeline -- /tmp/celdecomp-run

fn run(args: &[&str]) {
    let mut argv = vec!["celdecomp"];
    argv.extend_from_slice(args);
    println!("$ {}", argv.join(" "));
    let code = celdecomp::cli::run(argv);
    assert_eq!(code, 0, "command failed with exit code {code}");
}

fn main() {
    let root = std::env::args().nth(1).unwrap_or_else(|| "target/example-run".into());
    let p = |s: &str| format!("{root}/{s}");
    run(&["gen-data", "--n", "8", "--seed", "0", "--height", "32", "--width", "32", "--out", &p("data")]);
    run(&["gen-data", "--n", "2", "--seed", "100", "--height", "32", "--width", "32", "--out", &p("held")]);
    run(&["train-codec", "--data", &p("data"), "--out", &p("codec"), "--rgb-steps", "20", "--rgba-steps", "60"]);
    run(&[
        "train", "--data", &p("data"), "--codec", &p("codec/codec.ckpt"), "--out", &p("run"),
        "--steps", "20", "--backbone-steps", "40", "--checkpoint-every", "10",
    ]);
    run(&[
        "decompose", "--image", &p("held/sample_000100/source.png"), "--checkpoint", &p("run/checkpoints/step_20"),
        "--codec", &p("codec/codec.ckpt"), "--out", &p("decomposed"),
    ]);
    run(&["recompose", "--stack", &p("decomposed"), "--out", &p("recomposed_again.png")]);
    run(&[
        "eval", "--data", &p("held"), "--checkpoint", &p("run/checkpoints/step_20"), "--codec", &p("codec/codec.ckpt"),
        "--out", &p("eval"),
    ]);
}
