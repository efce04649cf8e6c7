fn main() {
    // Timestamps are suppressed so identical runs produce identical logs.
    env_logger::Builder::from_env(env_logger::Env::default())
        .format_timestamp(None)
        .init();
    std::process::exit(polarlab::cli::run(std::env::args_os()));
}
