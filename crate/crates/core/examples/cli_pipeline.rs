//! Drives the command line in-process: generate data, train briefly,
//! evaluate, and run the fixed-point check.

use affectfuse::cli::run;

fn call(args: &[&str]) -> i32 {
    let mut argv = vec!["affectfuse"];
    argv.extend_from_slice(args);
    println!("$ {}", argv.join(" "));
    let code = run(argv, &mut std::io::stdout(), &mut std::io::stderr());
    println!("exit {code}\n");
    code
}

fn main() -> std::io::Result<()> {
    let dir = std::env::temp_dir().join("affectfuse-cli-example");
    std::fs::create_dir_all(&dir)?;
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        "generator.train_sessions = 60\ngenerator.val_sessions = 20\ngenerator.test_sessions = 20\ntrain.epochs = 2\n",
    )?;
    let d = dir.to_str().unwrap();
    let c = cfg.to_str().unwrap();
    let data = format!("{d}/data.afus");
    call(&["generate-data", "--config", c, "--out", &data]);
    call(&["train", "--config", c, "--data", &data, "--out", d]);
    let ckpt = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("model_"))
        .expect("checkpoint written");
    call(&["eval", "--model", ckpt.to_str().unwrap(), "--data", &data, "--missing-rate", "0.4", "--out", d]);
    call(&["check-theory", "fixed-point"]);
    call(&[]);
    Ok(())
}
