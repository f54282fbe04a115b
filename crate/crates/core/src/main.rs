fn main() {
    let verbosity = std::env::args()
        .filter(|a| a == "-v" || a == "--verbose")
        .count();
    let level = match verbosity {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    std::process::exit(boostbert::cli::run(std::env::args_os()));
}
