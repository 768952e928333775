from cagnn.cli import main

main()
