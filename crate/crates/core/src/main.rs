fn main() {
    std::process::exit(agentcache::cli::main_with_args(std::env::args_os()));
}
