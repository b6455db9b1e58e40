fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RECSE_LOG_LEVEL", "warn")).init();
    std::process::exit(recse::cli::run(std::env::args_os()));
}
