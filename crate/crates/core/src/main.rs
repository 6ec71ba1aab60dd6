fn main() {
    std::process::exit(drrho::cli::run(std::env::args_os()));
}
