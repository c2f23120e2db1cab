# cgflow Test Suite