fn main() {
    let code = bisbm::cli::run(std::env::args_os());
    std::process::exit(code);
}
