fn main() {
    std::process::exit(gstrs::cli::run(std::env::args_os()));
}
